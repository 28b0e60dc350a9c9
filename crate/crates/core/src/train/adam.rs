use super::TrainError;
use crate::tensor::{ParamStore, Scalar, Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T: Scalar> {
    pub m: TensorMap<T>,
    pub v: TensorMap<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: TensorMap::new(),
            v: TensorMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &TensorMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: AdamConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = store.param(name)?;
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "gradient for '{name}' has shape {}, parameter has {}",
                g.shape(),
                p.shape()
            )));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != p.shape() {
                    return Err(TrainError::Config(format!(
                        "optimizer state for '{name}' has shape {}, parameter has {}",
                        t.shape(),
                        p.shape()
                    )));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let step_size = T::from_f64_lossy(lr / (1.0 - config.beta1.powf(t)));
    let v_corr = T::from_f64_lossy(1.0 / (1.0 - config.beta2.powf(t)));
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let eps = T::from_f64_lossy(config.eps);
    for (name, g) in grads {
        let shape = g.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let p = store.param_mut(name)?;
        let (pd, md, vd) = (p.make_mut(), m.make_mut(), v.make_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            pd[i] = pd[i] - step_size * md[i] / ((vd[i] * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store(values: &[(&str, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, v) in values {
            s.insert_param(*name, Tensor::full(Shape::vector(3), *v));
        }
        s
    }

    fn grads(values: &[(&str, f64)]) -> TensorMap<f64> {
        values
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::full(Shape::vector(3), *v)))
            .collect()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store(&[("a", 0.7)]);
        let before = s.clone();
        let mut st = AdamState::new();
        adam_step(&mut s, &grads(&[("a", 0.0)]), &mut st, 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[("a", 1.0)]);
        let mut st = AdamState::new();
        adam_step(&mut s, &grads(&[("a", 0.37)]), &mut st, 1e-3, AdamConfig::default()).unwrap();
        for v in s.param("a").unwrap().data() {
            // m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
            let expected = 1.0 - 1e-3 * 0.37 / (0.37 + 1e-8);
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_recurrence() {
        let c = AdamConfig::default();
        let mut s = store(&[("a", 0.5)]);
        let mut st = AdamState::new();
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 0.1 * t as f64 - 0.2;
            adam_step(&mut s, &grads(&[("a", g)]), &mut st, 1e-2, c).unwrap();
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= 1e-2 * mh / (vh.sqrt() + c.eps);
        }
        assert!((s.param("a").unwrap().data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn groups_are_independent() {
        let mut s = store(&[("a", 1.0), ("b", 1.0)]);
        let mut st = AdamState::new();
        adam_step(&mut s, &grads(&[("a", 1.0), ("b", 0.0)]), &mut st, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(s.param("b").unwrap().data(), &[1.0; 3]);
        assert!(st.m["b"].data().iter().all(|&x| x == 0.0));
        assert!(st.m["a"].data().iter().all(|&x| x != 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(&[("a", 1.0)]);
        let mut st = AdamState::new();
        let g: TensorMap<f64> = [("a".to_string(), Tensor::zeros(Shape::vector(2)))].into();
        assert!(adam_step(&mut s, &g, &mut st, 0.1, AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }
}
