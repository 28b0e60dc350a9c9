use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::spec::{Init, ModelSpec, ParamDecl, Variant, COLOR_CHANNELS, FEATURE_CHANNELS, LEVELS};
use crate::tensor::{BnMode, BnStats, Graph, ParamStore, Scalar, Shape, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial sizes must be divisible by this (five 2× poolings).
pub const RESOLUTION_MULTIPLE: usize = 1 << LEVELS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{what}: expected {expected} channels, got {actual}")]
    Channels {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("spatial size {h}x{w} must be a multiple of {RESOLUTION_MULTIPLE}")]
    Resolution { h: usize, w: usize },
    #[error("{0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether batch norm uses batch statistics (and updates running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train {
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            },
            Mode::Infer => BnMode::Infer { eps: BN_EPS },
        }
    }
}

/// Output of one encoder: the bottleneck and the pre-pool activation of each unit.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub latent: Var,
    pub taps: Vec<Var>,
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward<T: Scalar> {
    /// Gamma-domain prediction, `n×3×h×w`, non-negative.
    pub output: Var,
    /// Bottleneck fed to the decoder.
    pub latent: Var,
    /// Fusion sub-network output (absent for DEMCnoSN).
    pub fused: Option<Var>,
    /// Running-stat updates from train-mode batch norm, keyed by layer prefix.
    pub bn_updates: Vec<(String, BnStats<T>)>,
}

/// A denoiser: its spec plus parameters and BN buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    store: ParamStore<T>,
}

fn fill_init(decl: &ParamDecl, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = decl.shape;
    match decl.init {
        Init::Zeros => vec![0.0; s.numel()],
        Init::Ones => vec![1.0; s.numel()],
        Init::Xavier => {
            let fan_in = s.c * s.h * s.w;
            let fan_out = s.n * s.h * s.w;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..s.numel()).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Bilinear => {
            let k = bilinear_kernel(s.h);
            let mut v = vec![0.0; s.numel()];
            for c in 0..s.n.min(s.c) {
                let base = (c * s.c + c) * s.h * s.w;
                for y in 0..s.h {
                    for x in 0..s.w {
                        v[base + y * s.w + x] = k[y] * k[x];
                    }
                }
            }
            v
        }
        Init::SkipIdentity { arity } => {
            let k = s.n;
            let mut v = vec![0.0; s.numel()];
            for row in 0..k {
                for block in 0..arity {
                    v[row * s.c + block * k + row] = 1.0;
                }
            }
            v
        }
    }
}

/// 1-D bilinear up-sampling taps for a kernel of `size` (factor `ceil(size/2)`).
pub fn bilinear_kernel(size: usize) -> Vec<f64> {
    let factor = size.div_ceil(2) as f64;
    let center = if size % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    (0..size)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor)
        .collect()
}

fn channels_err(what: &'static str, expected: usize, actual: usize) -> NetError {
    NetError::Channels {
        what,
        expected,
        actual,
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initialises a model from `spec` (seeded by `spec.seed`).
    pub fn new(spec: ModelSpec) -> Result<Self, NetError> {
        spec.validate().map_err(NetError::Spec)?;
        let mut model = Model {
            store: ParamStore::new(),
            spec,
        };
        model.init_parameters(model.spec.seed);
        Ok(model)
    }

    /// Wraps an existing store; every declared tensor must be present with
    /// the declared shape.
    pub fn from_store(spec: ModelSpec, store: ParamStore<T>) -> Result<Self, NetError> {
        spec.validate().map_err(NetError::Spec)?;
        for decl in spec.layout() {
            let t = if decl.trainable {
                store.param(&decl.name).ok()
            } else {
                store.buffer(&decl.name)
            };
            match t {
                None => return Err(NetError::Shape(format!("missing tensor '{}'", decl.name))),
                Some(t) if t.shape() != decl.shape => {
                    return Err(NetError::Shape(format!(
                        "tensor '{}' has shape {}, expected {}",
                        decl.name,
                        t.shape(),
                        decl.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { spec, store })
    }

    /// Xavier for encoder/fusion/output convs, bilinear deconvs, `[I I I]`
    /// skip fusions, unit BN scale. Same seed gives bit-identical parameters.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for decl in self.spec.layout() {
            let data: Vec<T> = fill_init(&decl, &mut rng)
                .into_iter()
                .map(T::from_f64_lossy)
                .collect();
            let t = Tensor::from_vec(decl.shape, data).expect("layout shape matches data");
            if decl.trainable {
                store.insert_param(decl.name, t);
            } else {
                store.insert_buffer(decl.name, t);
            }
        }
        self.store = store;
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
        }
    }

    /// Stores running statistics produced by a train-mode forward.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BnStats<T>)>) {
        for (prefix, stats) in updates {
            self.store
                .insert_buffer(format!("{prefix}.running_mean"), stats.mean);
            self.store.insert_buffer(format!("{prefix}.running_var"), stats.var);
        }
    }

    fn conv(&self, g: &mut Graph<T>, name: &str, x: Var, pad: usize) -> Result<Var, NetError> {
        let w = g.param(&self.store, &format!("{name}.w"))?;
        let b = g.param(&self.store, &format!("{name}.b"))?;
        Ok(g.conv2d(x, w, b, 1, pad)?)
    }

    /// Four conv blocks mapping 12 feature channels to a 3-channel detail map;
    /// the two middle blocks carry batch norm.
    pub fn fusion_subnet(
        &self,
        g: &mut Graph<T>,
        features: Var,
        mode: Mode,
        bn_updates: &mut Vec<(String, BnStats<T>)>,
    ) -> Result<Var, NetError> {
        let c = g.shape(features).c;
        if c != FEATURE_CHANNELS {
            return Err(channels_err("fusion input", FEATURE_CHANNELS, c));
        }
        let mut x = features;
        for b in 1..=4 {
            let block = format!("fusion.b{b}");
            x = self.conv(g, &format!("{block}.conv"), x, 1)?;
            if b == 2 || b == 3 {
                let prefix = format!("{block}.bn");
                let gamma = g.param(&self.store, &format!("{prefix}.gamma"))?;
                let beta = g.param(&self.store, &format!("{prefix}.beta"))?;
                let running = match (
                    self.store.buffer(&format!("{prefix}.running_mean")),
                    self.store.buffer(&format!("{prefix}.running_var")),
                ) {
                    (Some(m), Some(v)) => Some(BnStats {
                        mean: m.clone(),
                        var: v.clone(),
                    }),
                    _ => None,
                };
                let (y, stats) = g.batch_norm(x, gamma, beta, running.as_ref(), mode.bn())?;
                if let Some(stats) = stats {
                    bn_updates.push((prefix, stats));
                }
                x = y;
            }
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Five units of `[conv3×3 + ReLU]×3 → maxpool2`. Taps are the pre-pool
    /// activations; the latent is the last unit's pooled output.
    pub fn encoder(&self, g: &mut Graph<T>, prefix: &str, input: Var) -> Result<EncoderOutput, NetError> {
        let s = g.shape(input);
        if s.h % RESOLUTION_MULTIPLE != 0 || s.w % RESOLUTION_MULTIPLE != 0 || s.h == 0 || s.w == 0 {
            return Err(NetError::Resolution { h: s.h, w: s.w });
        }
        let mut x = input;
        let mut taps = Vec::with_capacity(LEVELS);
        for u in 1..=LEVELS {
            for l in 1..=3 {
                x = self.conv(g, &format!("{prefix}.u{u}.c{l}"), x, 1)?;
                x = g.relu(x);
            }
            taps.push(x);
            x = g.maxpool2(x)?;
        }
        Ok(EncoderOutput { latent: x, taps })
    }

    /// `relu(W·[h_D; taps…] + b)` as a 1×1 convolution over the concatenation.
    pub fn skip_fuse(&self, g: &mut Graph<T>, name: &str, inputs: &[Var]) -> Result<Var, NetError> {
        let s0 = g.shape(inputs[0]);
        for &v in &inputs[1..] {
            if g.shape(v) != s0 {
                return Err(NetError::Shape(format!(
                    "skip fusion '{name}': {} vs {}",
                    g.shape(v),
                    s0
                )));
            }
        }
        let cat = g.concat_channels(inputs)?;
        let y = self.conv(g, name, cat, 0)?;
        Ok(g.relu(y))
    }

    /// Five `deconv4×4 → skip fusion` stages, then conv3×3 to colour + ReLU.
    /// `tap_sets` holds one tap list per encoder, in fusion order.
    pub fn decoder(&self, g: &mut Graph<T>, latent: Var, tap_sets: &[&[Var]]) -> Result<Var, NetError> {
        let arity = self.spec.variant.skip_arity();
        if tap_sets.len() + 1 != arity {
            return Err(NetError::Shape(format!(
                "{} decoder expects {} tap sets, got {}",
                self.spec.variant,
                arity - 1,
                tap_sets.len()
            )));
        }
        for taps in tap_sets {
            if taps.len() != LEVELS {
                return Err(NetError::Shape(format!(
                    "expected {LEVELS} taps per encoder, got {}",
                    taps.len()
                )));
            }
        }
        let mut x = latent;
        for k in 1..=LEVELS {
            let w = g.param(&self.store, &format!("dec.up{k}.w"))?;
            let b = g.param(&self.store, &format!("dec.up{k}.b"))?;
            x = g.deconv2d(x, w, b)?;
            let level = LEVELS - k;
            let mut inputs = vec![x];
            inputs.extend(tap_sets.iter().map(|t| t[level]));
            x = self.skip_fuse(g, &format!("dec.skip{k}"), &inputs)?;
        }
        let y = self.conv(g, "dec.out", x, 1)?;
        Ok(g.relu(y))
    }

    /// Gamma-domain noisy colour `n×3×h×w` plus normalised features
    /// `n×12×h×w` to a non-negative gamma-domain prediction.
    pub fn forward(&self, g: &mut Graph<T>, noisy: Var, features: Var, mode: Mode) -> Result<Forward<T>, NetError> {
        let cs = g.shape(noisy);
        let fs = g.shape(features);
        if cs.c != COLOR_CHANNELS {
            return Err(channels_err("noisy colour", COLOR_CHANNELS, cs.c));
        }
        if fs.c != FEATURE_CHANNELS {
            return Err(channels_err("features", FEATURE_CHANNELS, fs.c));
        }
        if (cs.n, cs.h, cs.w) != (fs.n, fs.h, fs.w) {
            return Err(NetError::Shape(format!("colour {cs} vs features {fs}")));
        }
        if cs.h % RESOLUTION_MULTIPLE != 0 || cs.w % RESOLUTION_MULTIPLE != 0 || cs.h == 0 || cs.w == 0 {
            return Err(NetError::Resolution { h: cs.h, w: cs.w });
        }
        let mut bn_updates = Vec::new();
        let (output, latent, fused) = match self.spec.variant {
            Variant::Demc => {
                let fused = self.fusion_subnet(g, features, mode, &mut bn_updates)?;
                let ef = self.encoder(g, "enc_feat", fused)?;
                let eh = self.encoder(g, "enc_hdr", noisy)?;
                let out = self.decoder(g, eh.latent, &[&ef.taps, &eh.taps])?;
                (out, eh.latent, Some(fused))
            }
            Variant::DemcNoSn => {
                let ef = self.encoder(g, "enc_feat", features)?;
                let eh = self.encoder(g, "enc_hdr", noisy)?;
                let out = self.decoder(g, eh.latent, &[&ef.taps, &eh.taps])?;
                (out, eh.latent, None)
            }
            Variant::Semc => {
                let fused = self.fusion_subnet(g, features, mode, &mut bn_updates)?;
                let joined = g.concat_channels(&[fused, noisy])?;
                let e = self.encoder(g, "enc", joined)?;
                let out = self.decoder(g, e.latent, &[&e.taps])?;
                (out, e.latent, Some(fused))
            }
        };
        Ok(Forward {
            output,
            latent,
            fused,
            bn_updates,
        })
    }

    /// Convenience inference on plain tensors (BN running stats).
    pub fn infer(&self, noisy: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let c = g.input(noisy.clone());
        let f = g.input(features.clone());
        let fw = self.forward(&mut g, c, f, Mode::Infer)?;
        Ok(g.value(fw.output).clone())
    }
}

/// Expected latent shape for an input of `n×·×h×w`.
pub fn latent_shape(spec: &ModelSpec, n: usize, h: usize, w: usize) -> Shape {
    Shape::new(
        n,
        spec.encoder_channels[LEVELS - 1],
        h / RESOLUTION_MULTIPLE,
        w / RESOLUTION_MULTIPLE,
    )
}
