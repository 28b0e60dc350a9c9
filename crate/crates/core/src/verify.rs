//! Finite-difference verification of every differentiable operator and of the
//! whole denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{Mode, Model, ModelSpec, NetError, Variant, COLOR_CHANNELS, FEATURE_CHANNELS};
use crate::tensor::gradcheck::{op_checks, relative_error};
use crate::tensor::{Graph, OpKind, ParamStore, Shape, Tensor};
use crate::train::{relmse_loss, LOSS_EPS};

pub const END_TO_END_THRESHOLD: f64 = 1e-3;
pub const END_TO_END_SIZE: usize = 32;
pub const END_TO_END_PROBES: usize = 50;
pub const END_TO_END_STEP: f64 = 1e-5;
/// Probes are drawn among entries whose gradient is at least this fraction
/// of the largest gradient magnitude in the same tensor.
pub const PROBE_MAGNITUDE_FLOOR: f64 = 1e-2;
/// Tensors whose gradient never exceeds this fraction of the global maximum
/// (biases cancelled by a following batch norm) are not probed.
pub const CANCELLED_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

/// Names accepted by the fault-injection hook.
pub fn op_kind(name: &str) -> Option<OpKind> {
    op_checks().into_iter().find(|c| c.name == name).map(|c| c.kind)
}

struct Problem {
    spec: ModelSpec,
    noisy: Tensor<f64>,
    features: Tensor<f64>,
    reference: Tensor<f64>,
}

impl Problem {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = END_TO_END_SIZE;
        let mut fill = |c: usize, lo: f64, hi: f64| Tensor::from_fn(Shape::new(1, c, s, s), |_| rng.random_range(lo..hi));
        Problem {
            spec: ModelSpec::new(Variant::Demc, seed),
            noisy: fill(COLOR_CHANNELS, 0.0, 1.0),
            features: fill(FEATURE_CHANNELS, -2.0, 2.0),
            reference: fill(COLOR_CHANNELS, 0.05, 2.0),
        }
    }

    fn loss(&self, store: &ParamStore<f64>, fault: Option<OpKind>) -> Result<(Graph<f64>, crate::tensor::Var), NetError> {
        let model = Model::from_store(self.spec.clone(), store.clone())?;
        let mut g = Graph::new();
        g.inject_backward_fault(fault);
        let c = g.input(self.noisy.clone());
        let f = g.input(self.features.clone());
        let fw = model.forward(&mut g, c, f, Mode::Train)?;
        let l = relmse_loss(&mut g, fw.output, &self.reference, LOSS_EPS)?;
        Ok((g, l))
    }
}

/// Full DEMC in f64 on a random 32×32 input with the training loss.
/// Returns the largest relative error over the probes.
pub fn end_to_end_grad_check(seed: u64, fault: Option<OpKind>) -> Result<f64, NetError> {
    let probes = end_to_end_probes(seed, fault, END_TO_END_STEP)?;
    Ok(probes.iter().fold(0.0, |m, p| m.max(relative_error(p.analytic, p.numeric))))
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences on `END_TO_END_PROBES` entries drawn from `seed`.
///
/// A candidate whose left and right one-sided slopes disagree straddles a
/// ReLU or max-pool kink and is redrawn.
pub fn end_to_end_probes(seed: u64, fault: Option<OpKind>, step: f64) -> Result<Vec<Probe>, NetError> {
    let problem = Problem::new(seed);
    let store = Model::<f64>::new(problem.spec.clone())?.store().clone();
    let (mut g, l) = problem.loss(&store, fault)?;
    let grads = g.backward(l)?;
    drop(g);

    let global = grads.values().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let names: Vec<&String> = grads
        .iter()
        .filter(|(_, t)| t.data().iter().any(|v| v.abs() > CANCELLED_FLOOR * global))
        .map(|(k, _)| k)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut probe_store = store.clone();
    let mut out = Vec::with_capacity(END_TO_END_PROBES);
    let mut attempts = 0;
    while out.len() < END_TO_END_PROBES && attempts < 4 * END_TO_END_PROBES {
        attempts += 1;
        let name = names[rng.random_range(0..names.len())];
        let g = grads[name].data();
        let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let eligible: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= PROBE_MAGNITUDE_FLOOR * max).collect();
        let idx = eligible[rng.random_range(0..eligible.len())];

        let original = store.param(name)?.data()[idx];
        let mut eval = |v: f64| -> Result<f64, NetError> {
            probe_store.param_mut(name)?.make_mut()[idx] = v;
            let (g, l) = problem.loss(&probe_store, None)?;
            Ok(g.value(l).data()[0])
        };
        let minus = eval(original - step)?;
        let plus = eval(original + step)?;
        let centre = eval(original)?;
        let left = (centre - minus) / step;
        let right = (plus - centre) / step;
        if relative_error(left, right) > END_TO_END_THRESHOLD {
            continue;
        }
        out.push(Probe {
            name: name.clone(),
            index: idx,
            analytic: g[idx],
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(out)
}

/// Every registered operator once, then the end-to-end model check.
pub fn grad_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradReport>, NetError> {
    let mut out = Vec::new();
    for check in op_checks() {
        out.push(GradReport {
            name: check.name.to_string(),
            max_rel_error: check.run(seed, fault)?,
            threshold: check.threshold,
        });
    }
    out.push(GradReport {
        name: "demc_end_to_end".to_string(),
        max_rel_error: end_to_end_grad_check(seed, fault)?,
        threshold: END_TO_END_THRESHOLD,
    });
    Ok(out)
}
