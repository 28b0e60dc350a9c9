//! Central finite-difference oracle for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BnMode, BnStats, Graph, OpKind, ParamStore, Shape, Tensor, TensorError, Var};

/// `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_loss<F>(build: &F, store: &ParamStore<f64>) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the analytic gradient of `param` against central differences on
/// `probes` randomly chosen entries (all entries if there are fewer).
/// `build` must construct the same scalar loss from the given store each call.
pub fn grad_check<F>(
    build: F,
    store: &ParamStore<f64>,
    param: &str,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("step {step} outside [1e-6, 1e-4]"),
        });
    }
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(param)
        .ok_or_else(|| TensorError::UnknownParameter(param.to_string()))?;
    let len = analytic.len();
    let indices: Vec<usize> = if len <= probes {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..probes).map(|_| rng.random_range(0..len)).collect()
    };
    let mut worst = 0.0f64;
    let mut probe_store = store.clone();
    for idx in indices {
        let original = store.param(param)?.data()[idx];
        probe_store.param_mut(param)?.make_mut()[idx] = original + step;
        let plus = eval_loss(&build, &probe_store)?;
        probe_store.param_mut(param)?.make_mut()[idx] = original - step;
        let minus = eval_loss(&build, &probe_store)?;
        probe_store.param_mut(param)?.make_mut()[idx] = original;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[idx], numeric));
    }
    Ok(worst)
}

/// Runs [`grad_check`] on every parameter of `store` and returns the maximum.
pub fn grad_check_all<F>(
    build: F,
    store: &ParamStore<f64>,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut worst = 0.0f64;
    for (i, name) in store.params().keys().enumerate() {
        let e = grad_check(&build, store, name, probes, step, seed.wrapping_add(i as u64))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// One registered operator check.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub kind: OpKind,
    pub threshold: f64,
    run: fn(u64, Option<OpKind>) -> Result<f64, TensorError>,
}

impl OpCheck {
    /// Max relative error for a random small instance drawn from `seed`.
    pub fn run(&self, seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
        (self.run)(seed, fault)
    }
}

pub const OP_THRESHOLD: f64 = 1e-4;
const PROBES: usize = 20;
const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn small_shape(rng: &mut ChaCha8Rng, even: bool) -> Shape {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=4);
    let (h, w) = if even {
        (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4))
    } else {
        (rng.random_range(2..=8), rng.random_range(2..=8))
    };
    Shape::new(n, c, h, w)
}

/// Wraps an op in `loss = Σ op(...) ⊙ R` for a fixed random `R`.
fn check_with<F>(seed: u64, store: ParamStore<f64>, fault: Option<OpKind>, op: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let weights = std::cell::OnceCell::new();
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var, TensorError> {
        g.inject_backward_fault(fault);
        let y = op(g, s)?;
        let shape = g.shape(y);
        let r = weights
            .get_or_init(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                random_tensor(&mut rng, shape, -1.0, 1.0)
            })
            .clone();
        let r = g.input(r);
        let m = g.mul(y, r)?;
        Ok(g.sum(m))
    };
    grad_check_all(build, &store, PROBES, STEP, seed)
}

fn check_conv2d(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strided = rng.random_bool(0.5);
    let (k, stride, pad) = if strided { (4, 2, 1) } else { (3, 1, 1) };
    let xs = small_shape(&mut rng, true);
    let co = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    store.insert_param("w", random_tensor(&mut rng, Shape::new(co, xs.c, k, k), -1.0, 1.0));
    store.insert_param("b", random_tensor(&mut rng, Shape::vector(co), -1.0, 1.0));
    check_with(seed, store, fault, move |g, s| {
        let x = g.param(s, "x")?;
        let w = g.param(s, "w")?;
        let b = g.param(s, "b")?;
        g.conv2d(x, w, b, stride, pad)
    })
}

fn check_deconv2d(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, false);
    let co = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    store.insert_param("w", random_tensor(&mut rng, Shape::new(xs.c, co, 4, 4), -1.0, 1.0));
    store.insert_param("b", random_tensor(&mut rng, Shape::vector(co), -1.0, 1.0));
    check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        let w = g.param(s, "w")?;
        let b = g.param(s, "b")?;
        g.deconv2d(x, w, b)
    })
}

fn check_maxpool2(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, true);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        g.maxpool2(x)
    })
}

fn check_relu(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, false);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        Ok(g.relu(x))
    })
}

fn bn_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut xs = small_shape(rng, false);
    xs.h = xs.h.max(2);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(rng, xs, -2.0, 2.0));
    store.insert_param("gamma", random_tensor(rng, Shape::vector(xs.c), 0.5, 1.5));
    store.insert_param("beta", random_tensor(rng, Shape::vector(xs.c), -1.0, 1.0));
    store
}

fn check_batch_norm(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = bn_store(&mut rng);
    let c = store.param("gamma")?.len();
    let running = BnStats {
        mean: random_tensor(&mut rng, Shape::vector(c), -1.0, 1.0),
        var: random_tensor(&mut rng, Shape::vector(c), 0.5, 2.0),
    };
    let train = check_with(seed, store.clone(), fault, |g, s| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        let mode = BnMode::Train {
            momentum: 0.1,
            eps: 1e-5,
        };
        Ok(g.batch_norm(x, gamma, beta, None, mode)?.0)
    })?;
    let infer = check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        Ok(g
            .batch_norm(x, gamma, beta, Some(&running), BnMode::Infer { eps: 1e-5 })?
            .0)
    })?;
    Ok(train.max(infer))
}

fn check_concat(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, false);
    let mut other = xs;
    other.c = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    store.insert_param("a", random_tensor(&mut rng, xs, -1.0, 1.0));
    store.insert_param("b", random_tensor(&mut rng, other, -1.0, 1.0));
    check_with(seed, store, fault, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        g.concat_channels(&[a, b, a])
    })
}

fn binary_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let xs = small_shape(rng, false);
    let mut store = ParamStore::new();
    store.insert_param("a", random_tensor(rng, xs, -1.0, 1.0));
    store.insert_param("b", random_tensor(rng, xs, -1.0, 1.0));
    store
}

fn check_add(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_with(seed, binary_store(&mut rng), fault, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        g.add(a, b)
    })
}

fn check_mul(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_with(seed, binary_store(&mut rng), fault, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        g.mul(a, b)
    })
}

fn check_scale(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(-3.0..3.0);
    let xs = small_shape(&mut rng, false);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    check_with(seed, store, fault, move |g, s| {
        let x = g.param(s, "x")?;
        Ok(g.scale(x, k))
    })
}

fn check_pow(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, false);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, 0.1, 2.0));
    check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        Ok(g.pow(x, 2.2))
    })
}

fn check_sum(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = small_shape(&mut rng, false);
    let mut store = ParamStore::new();
    store.insert_param("x", random_tensor(&mut rng, xs, -1.0, 1.0));
    check_with(seed, store, fault, |g, s| {
        let x = g.param(s, "x")?;
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    })
}

fn check_relmse(seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = small_shape(&mut rng, false);
    xs.c = 3;
    let reference = random_tensor(&mut rng, xs, 0.0, 2.0);
    let mut store = ParamStore::new();
    store.insert_param("pred", random_tensor(&mut rng, xs, 0.0, 2.0));
    check_with(seed, store, fault, move |g, s| {
        let p = g.param(s, "pred")?;
        g.relmse(p, &reference, 1e-3)
    })
}

/// Every differentiable operator, each listed once.
pub fn op_checks() -> Vec<OpCheck> {
    let c = |name, kind, run| OpCheck {
        name,
        kind,
        threshold: OP_THRESHOLD,
        run,
    };
    vec![
        c("conv2d", OpKind::Conv2d, check_conv2d as fn(u64, Option<OpKind>) -> _),
        c("deconv2d", OpKind::Deconv2d, check_deconv2d),
        c("maxpool2", OpKind::MaxPool2, check_maxpool2),
        c("relu", OpKind::Relu, check_relu),
        c("batch_norm", OpKind::BatchNorm, check_batch_norm),
        c("concat_channels", OpKind::Concat, check_concat),
        c("add", OpKind::Add, check_add),
        c("mul", OpKind::Mul, check_mul),
        c("scale", OpKind::Scale, check_scale),
        c("pow", OpKind::Pow, check_pow),
        c("sum", OpKind::Sum, check_sum),
        c("relmse", OpKind::RelMse, check_relmse),
    ]
}
