use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, lr_schedule, relmse_loss, save_checkpoint, AdamConfig, AdamState, Checkpoint, TrainConfig,
    TrainError, TrainState,
};
use crate::data::{extract_patches, gamma_forward, load_sample, read_manifest, zscore_features, Sample};
use crate::net::{Mode, Model, ModelSpec};
use crate::tensor::{relmse_value, FlushDenormals, Graph, Tensor};

/// Where a training patch came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchId {
    pub scene: String,
    pub y: usize,
    pub x: usize,
}

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{},{}", self.scene, self.y, self.x)
    }
}

/// Patches already in network form: gamma-domain colour, normalised
/// features and the HDR reference.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub ids: Vec<PatchId>,
    noisy: Vec<Tensor<f32>>,
    features: Vec<Tensor<f32>>,
    reference: Vec<Tensor<f32>>,
}

/// One minibatch, stacked along the batch axis.
pub(crate) struct Batch {
    pub iteration: u64,
    pub indices: Vec<usize>,
    pub noisy: Tensor<f32>,
    pub features: Tensor<f32>,
    pub reference: Tensor<f32>,
}

impl TrainSet {
    /// Normalises each whole image, then cuts patches. Input samples are not modified.
    pub fn from_samples(samples: &[(String, Sample)], patch: usize, stride: usize) -> Result<Self, TrainError> {
        let mut set = TrainSet::default();
        for (name, sample) in samples {
            let reference = sample
                .reference
                .clone()
                .ok_or_else(|| TrainError::Config(format!("sample {name} has no reference")))?;
            let prepared = Sample {
                noisy: gamma_forward(&sample.noisy)?,
                features: zscore_features(&sample.features).0,
                reference: Some(reference),
            };
            for p in extract_patches(&prepared, patch, stride)? {
                set.ids.push(PatchId {
                    scene: name.clone(),
                    y: p.y,
                    x: p.x,
                });
                set.noisy.push(p.sample.noisy);
                set.features.push(p.sample.features);
                set.reference.push(p.sample.reference.expect("reference kept"));
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub(crate) fn batch(&self, iteration: u64, indices: Vec<usize>) -> Result<Batch, TrainError> {
        let pick = |v: &[Tensor<f32>]| Tensor::stack_batch(&indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        Ok(Batch {
            iteration,
            noisy: pick(&self.noisy)?,
            features: pick(&self.features)?,
            reference: pick(&self.reference)?,
            indices,
        })
    }
}

/// Loads a manifest and splits off the last `validation_fraction` of scenes.
pub fn load_split(manifest: &Path, config: &TrainConfig) -> Result<(TrainSet, Option<TrainSet>), TrainError> {
    let entries = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let name = e.file_name().map_or_else(|| e.display().to_string(), |n| n.to_string_lossy().into_owned());
        samples.push((name, load_sample(e)?));
    }
    let n_val = if samples.len() > 1 {
        ((samples.len() as f64 * config.validation_fraction).round() as usize).min(samples.len() - 1)
    } else {
        0
    };
    let val_samples = samples.split_off(samples.len() - n_val);
    let train = TrainSet::from_samples(&samples, config.patch_size, config.patch_stride)?;
    let val = if val_samples.is_empty() {
        None
    } else {
        Some(TrainSet::from_samples(&val_samples, config.patch_size, config.patch_size)?)
    };
    Ok((train, val))
}

/// Batch `iteration` is a pure function of (seed, iteration): position
/// `iteration·B + b` indexes a per-epoch permutation keyed by the seed.
struct Sampler {
    seed: u64,
    len: usize,
    batch: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    fn indices(&mut self, iteration: u64) -> Vec<usize> {
        (0..self.batch)
            .map(|b| {
                let j = iteration * self.batch as u64 + b as u64;
                let epoch = j / self.len as u64;
                let perm = match &self.cached {
                    Some((e, p)) if *e == epoch => p,
                    _ => {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                        rng.set_stream(epoch);
                        let mut p: Vec<usize> = (0..self.len).collect();
                        p.shuffle(&mut rng);
                        &self.cached.insert((epoch, p)).1
                    }
                };
                perm[(j % self.len as u64) as usize]
            })
            .collect()
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    /// Iterations completed, counting this one.
    pub iteration: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct Trainer {
    config: TrainConfig,
    state: TrainState,
    train: Arc<TrainSet>,
    val: Option<TrainSet>,
    sampler: Sampler,
    log: Vec<LogRecord>,
}

impl Trainer {
    pub fn new(spec: ModelSpec, train: TrainSet, val: Option<TrainSet>, config: TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(spec)?;
        let state = TrainState {
            model,
            adam: AdamState::new(),
            iteration: 0,
            seed: config.seed,
        };
        Self::with_state(state, train, val, config)
    }

    /// Continues from a checkpoint; the stored seed replaces `config.seed`.
    pub fn resume(ckpt: &Checkpoint, train: TrainSet, val: Option<TrainSet>, config: TrainConfig) -> Result<Self, TrainError> {
        let spec = ckpt.infer_spec()?;
        let state = ckpt.train_state(&spec)?;
        Self::with_state(state, train, val, config)
    }

    fn with_state(state: TrainState, train: TrainSet, val: Option<TrainSet>, mut config: TrainConfig) -> Result<Self, TrainError> {
        config.seed = state.seed;
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let sampler = Sampler {
            seed: state.seed,
            len: train.len(),
            batch: config.batch_size,
            cached: None,
        };
        Ok(Trainer {
            config,
            state,
            train: Arc::new(train),
            val: val.filter(|v| !v.is_empty()),
            sampler,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.state.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.state)
    }

    pub fn train_set(&self) -> &TrainSet {
        &self.train
    }

    /// Patch indices of batch `iteration`.
    pub fn batch_indices(&mut self, iteration: u64) -> Vec<usize> {
        self.sampler.indices(iteration)
    }

    fn apply(&mut self, batch: Batch) -> Result<LogRecord, TrainError> {
        let it = self.state.iteration;
        debug_assert_eq!(batch.iteration, it);
        let lr = lr_schedule(it, &self.config);
        let _flush = FlushDenormals::new();
        let mut g = Graph::new();
        let c = g.input(batch.noisy);
        let f = g.input(batch.features);
        let fw = self.state.model.forward(&mut g, c, f, Mode::Train)?;
        let loss = relmse_loss(&mut g, fw.output, &batch.reference, self.config.eps_loss)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: it,
                loss: value,
                batch: batch.indices.iter().map(|&i| self.train.ids[i].to_string()).collect(),
            });
        }
        let grads = g.backward(loss)?;
        // release the tape's references so parameters update in place
        drop(g);
        self.state.model.apply_bn_updates(fw.bn_updates);
        adam_step(self.state.model.store_mut(), &grads, &mut self.state.adam, lr, AdamConfig::default())?;
        self.state.iteration += 1;
        Ok(LogRecord {
            iteration: self.state.iteration,
            lr,
            train_loss: value,
            val_loss: None,
        })
    }

    /// Single synchronous iteration.
    pub fn step(&mut self) -> Result<LogRecord, TrainError> {
        let it = self.state.iteration;
        let indices = self.sampler.indices(it);
        let batch = self.train.batch(it, indices)?;
        let rec = self.apply(batch)?;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Mean RelMSE over a patch set with running BN statistics.
    pub fn evaluate(&self, set: &TrainSet) -> Result<f64, TrainError> {
        mean_patch_loss(&self.state.model, set, Mode::Infer, self.config.eps_loss)
    }

    /// Trains until `config.total_iterations`, writing checkpoints to
    /// `checkpoint_path` at the configured cadence and at the end.
    pub fn run(&mut self, checkpoint_path: Option<&Path>) -> Result<&[LogRecord], TrainError> {
        let total = self.config.total_iterations;
        let start = self.state.iteration;
        if start >= total {
            return Ok(&self.log);
        }
        let (tx, rx) = mpsc::sync_channel::<Result<Batch, TrainError>>(2);
        let producer = (!self.config.deterministic).then(|| {
            let set = Arc::clone(&self.train);
            let mut sampler = Sampler {
                cached: None,
                ..self.sampler
            };
            std::thread::spawn(move || {
                for it in start..total {
                    let b = set.batch(it, sampler.indices(it));
                    if tx.send(b).is_err() {
                        break;
                    }
                }
            })
        });
        let result = (|| {
            while self.state.iteration < total {
                let it = self.state.iteration;
                let batch = match producer {
                    Some(_) => rx.recv().map_err(|_| TrainError::Config("batch loader stopped".into()))??,
                    None => self.train.batch(it, self.sampler.indices(it))?,
                };
                let mut rec = self.apply(batch)?;
                let done = rec.iteration;
                if let Some(val) = &self.val {
                    let every = self.config.validate_every;
                    if (every > 0 && done % every == 0) || done == total {
                        rec.val_loss = Some(self.evaluate(val)?);
                    }
                }
                self.log.push(rec);
                if let Some(p) = checkpoint_path {
                    let every = self.config.checkpoint_every;
                    if (every > 0 && done % every == 0) || done == total {
                        save_checkpoint(p, &self.checkpoint())?;
                    }
                }
            }
            Ok(())
        })();
        drop(rx);
        if let Some(h) = producer {
            let _ = h.join();
        }
        result.map(|_| self.log.as_slice())
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        write_log_csv(path, &self.log)
    }
}

impl Clone for Sampler {
    fn clone(&self) -> Self {
        Sampler {
            cached: None,
            ..*self
        }
    }
}

/// Mean per-patch RelMSE of `model` on `set`, one patch at a time.
pub fn mean_patch_loss(model: &Model<f32>, set: &TrainSet, mode: Mode, eps: f64) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for i in 0..set.len() {
        let mut g = Graph::new();
        let c = g.input(set.noisy[i].clone());
        let f = g.input(set.features[i].clone());
        let fw = model.forward(&mut g, c, f, mode)?;
        let hdr = g.value(fw.output).map(|v| v.powf(2.2));
        total += relmse_value(hdr.data(), &set.reference[i], eps as f32) as f64;
    }
    Ok(total / set.len().max(1) as f64)
}

/// `iteration,lr,train_loss,val_loss`; the last column is empty when not measured.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut text = String::from("iteration,lr,train_loss,val_loss\n");
    for r in log {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{}\n", r.iteration, r.lr, r.train_loss, val));
    }
    fs::write(path, text).map_err(|e| TrainError::Io {
        path: PathBuf::from(path),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Variant;
    use crate::synth::{generate_scene, SceneRecipe};

    fn samples(n: usize, size: usize) -> Vec<(String, Sample)> {
        (0..n)
            .map(|i| {
                let r = SceneRecipe::from_seed(i as u64, size, size).with_spp(4, 64);
                (format!("s{i}"), generate_scene(&r).unwrap())
            })
            .collect()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            total_iterations: 6,
            batch_size: 2,
            patch_size: 32,
            patch_stride: 16,
            checkpoint_every: 0,
            validate_every: 3,
            deterministic: true,
            seed: 9,
            ..Default::default()
        }
    }

    fn trainer(config: TrainConfig) -> Trainer {
        let set = TrainSet::from_samples(&samples(2, 48), 32, 16).unwrap();
        let val = TrainSet::from_samples(&samples(1, 32), 32, 32).unwrap();
        Trainer::new(ModelSpec::scaled(Variant::Demc, 0.125, 4), set, Some(val), config).unwrap()
    }

    #[test]
    fn patch_set_prepares_inputs() {
        let src = samples(1, 48);
        let before = src.clone();
        let set = TrainSet::from_samples(&src, 32, 16).unwrap();
        assert_eq!(src, before);
        assert_eq!(set.len(), 4);
        assert_eq!(set.ids[3].to_string(), "s0@16,16");
        let raw = src[0].1.noisy.at(0, 1, 16, 16);
        assert!((set.noisy[3].at(0, 1, 0, 0) - raw.powf(1.0 / 2.2)).abs() < 1e-6);
    }

    #[test]
    fn sampler_visits_each_patch_once_per_epoch() {
        let mut s = Sampler {
            seed: 3,
            len: 7,
            batch: 3,
            cached: None,
        };
        let mut seen: Vec<usize> = (0..7).flat_map(|it| s.indices(it)).collect();
        let first: Vec<usize> = seen.drain(..7).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert_eq!(s.clone().indices(5), s.indices(5));
    }

    #[test]
    fn deterministic_runs_match_and_resume_is_exact() {
        let mut a = trainer(config());
        a.run(None).unwrap();
        let mut b = trainer(config());
        b.run(None).unwrap();
        assert_eq!(a.log(), b.log());
        assert_eq!(a.log().len(), 6);
        assert!(a.log()[2].val_loss.is_some() && a.log()[1].val_loss.is_none());

        let mut first = trainer(TrainConfig {
            total_iterations: 6,
            ..config()
        });
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = super::super::encode_checkpoint(&first.checkpoint()).unwrap();
        let ckpt = super::super::decode_checkpoint(&bytes).unwrap();
        let set = TrainSet::from_samples(&samples(2, 48), 32, 16).unwrap();
        let val = TrainSet::from_samples(&samples(1, 32), 32, 32).unwrap();
        let mut resumed = Trainer::resume(&ckpt, set, Some(val), config()).unwrap();
        resumed.run(None).unwrap();
        let tail: Vec<_> = a.log()[3..].iter().map(|r| (r.iteration, r.train_loss.to_bits())).collect();
        let got: Vec<_> = resumed.log().iter().map(|r| (r.iteration, r.train_loss.to_bits())).collect();
        assert_eq!(got, tail);
        assert_eq!(resumed.log(), &a.log()[3..]);
    }

    #[test]
    fn prefetch_matches_synchronous() {
        let mut a = trainer(config());
        a.run(None).unwrap();
        let mut b = trainer(TrainConfig {
            deterministic: false,
            ..config()
        });
        b.run(None).unwrap();
        assert_eq!(a.log(), b.log());
    }

    #[test]
    fn nan_aborts_with_batch_ids() {
        let mut t = trainer(config());
        let name = "dec.out.b".to_string();
        let p = t.state.model.store_mut().param_mut(&name).unwrap();
        p.make_mut()[0] = f32::NAN;
        match t.step() {
            Err(TrainError::NonFinite { iteration, batch, .. }) => {
                assert_eq!(iteration, 0);
                assert_eq!(batch.len(), 2);
                assert!(batch[0].starts_with('s'));
            }
            other => panic!("expected NaN abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn log_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let log = vec![
            LogRecord {
                iteration: 1,
                lr: 1e-4,
                train_loss: 0.5,
                val_loss: None,
            },
            LogRecord {
                iteration: 2,
                lr: 5e-5,
                train_loss: 0.25,
                val_loss: Some(0.125),
            },
        ];
        write_log_csv(&p, &log).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "iteration,lr,train_loss,val_loss\n1,0.0001,0.5,\n2,0.00005,0.25,0.125\n"
        );
    }
}
