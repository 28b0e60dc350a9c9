//! Binary checkpoints.
//!
//! ```text
//! "DEMC" | version u32 | count u32 | count × tensor
//! tensor = name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | f32 × numel
//! ```
//!
//! All integers and floats are little-endian. Adam moments live under
//! `adam.m.<name>` / `adam.v.<name>`. The iteration counter and seed are
//! stored as four exact 16-bit chunks in `train.iteration` / `train.seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{AdamState, TrainError};
use crate::net::{Model, ModelSpec};
use crate::tensor::{ParamStore, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEMC";
pub const CHECKPOINT_VERSION: u32 = 1;

const ITERATION_KEY: &str = "train.iteration";
const SEED_KEY: &str = "train.seed";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Named tensors in file order (sorted by name).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub seed: u64,
}

fn dims_of(s: Shape) -> Vec<usize> {
    if (s.n, s.h, s.w) == (1, 1, 1) {
        vec![s.c]
    } else {
        vec![s.n, s.c, s.h, s.w]
    }
}

fn shape_of(dims: &[usize]) -> Option<Shape> {
    match *dims {
        [c] => Some(Shape::vector(c)),
        [n, c] => Some(Shape::new(n, c, 1, 1)),
        [n, c, h] => Some(Shape::new(n, c, h, 1)),
        [n, c, h, w] => Some(Shape::new(n, c, h, w)),
        _ => None,
    }
}

fn encode_u64(v: u64) -> Tensor<f32> {
    Tensor::from_fn(Shape::vector(4), |i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn decode_u64(t: &Tensor<f32>, name: &str) -> Result<u64, TrainError> {
    if t.len() != 4 {
        return Err(TrainError::Format(format!("'{name}' must hold 4 values")));
    }
    let mut v = 0u64;
    for (i, &x) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return Err(TrainError::Format(format!("'{name}' holds invalid chunk {x}")));
        }
        v |= (x as u64) << (16 * i);
    }
    Ok(v)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| TrainError::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let len = u16::try_from(name.len()).map_err(|_| TrainError::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = dims_of(t.shape());
        out.push(dims.len() as u8);
        for d in dims {
            let d = u32::try_from(d).map_err(|_| TrainError::Format(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.len() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(TrainError::Truncated {
                offset: self.pos,
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "DEMC"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let shape = shape_of(&dims).ok_or_else(|| TrainError::Format(format!("'{name}' has {ndim} dimensions")))?;
        let payload = r.take(shape.numel() * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
            return Err(TrainError::Format(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        let store = model.store();
        let tensors = store
            .params()
            .iter()
            .chain(store.buffers())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Checkpoint { tensors }
    }

    pub fn from_state(state: &TrainState) -> Self {
        let mut ckpt = Self::from_model(&state.model);
        for (name, p) in state.model.store().params() {
            for (prefix, moments) in [(ADAM_M, &state.adam.m), (ADAM_V, &state.adam.v)] {
                let t = moments.get(name).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
                ckpt.tensors.insert(format!("{prefix}{name}"), t);
            }
        }
        ckpt.tensors.insert(ITERATION_KEY.into(), encode_u64(state.iteration));
        ckpt.tensors.insert(SEED_KEY.into(), encode_u64(state.seed));
        ckpt
    }

    fn is_model_tensor(name: &str) -> bool {
        !(name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name == ITERATION_KEY || name == SEED_KEY)
    }

    /// Spec implied by the stored tensor names and shapes.
    pub fn infer_spec(&self) -> Result<ModelSpec, TrainError> {
        let shapes = self
            .tensors
            .iter()
            .filter(|(k, _)| Self::is_model_tensor(k))
            .map(|(k, v)| (k.clone(), v.shape()))
            .collect();
        ModelSpec::infer(&shapes).map_err(TrainError::Format)
    }

    fn check_names(&self, expected: &BTreeSet<String>, optional: impl Fn(&str) -> bool) -> Result<(), TrainError> {
        let missing: Vec<String> = expected
            .iter()
            .filter(|n| !self.tensors.contains_key(*n))
            .cloned()
            .collect();
        let unexpected: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| !expected.contains(*n) && !optional(n))
            .cloned()
            .collect();
        if missing.is_empty() && unexpected.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Mismatch { missing, unexpected })
        }
    }

    fn build_model(&self, spec: &ModelSpec) -> Result<Model<f32>, TrainError> {
        let mut store = ParamStore::new();
        let mut wrong = Vec::new();
        for decl in spec.layout() {
            let t = self.tensors[&decl.name].clone();
            if t.shape() != decl.shape {
                wrong.push(format!("{} is {} (expected {})", decl.name, t.shape(), decl.shape));
            }
            if decl.trainable {
                store.insert_param(decl.name, t);
            } else {
                store.insert_buffer(decl.name, t);
            }
        }
        if !wrong.is_empty() {
            return Err(TrainError::Format(format!("shape mismatch: {}", wrong.join("; "))));
        }
        Ok(Model::from_store(spec.clone(), store)?)
    }

    /// Model weights only; optimizer and counter entries are ignored.
    pub fn model(&self, spec: &ModelSpec) -> Result<Model<f32>, TrainError> {
        let expected = spec.layout().into_iter().map(|d| d.name).collect();
        self.check_names(&expected, |n| !Self::is_model_tensor(n))?;
        self.build_model(spec)
    }

    /// Full training state for `spec`.
    pub fn train_state(&self, spec: &ModelSpec) -> Result<TrainState, TrainError> {
        let layout = spec.layout();
        let mut expected: BTreeSet<String> = layout.iter().map(|d| d.name.clone()).collect();
        for d in layout.iter().filter(|d| d.trainable) {
            expected.insert(format!("{ADAM_M}{}", d.name));
            expected.insert(format!("{ADAM_V}{}", d.name));
        }
        expected.insert(ITERATION_KEY.into());
        expected.insert(SEED_KEY.into());
        self.check_names(&expected, |_| false)?;
        let model = self.build_model(spec)?;
        let iteration = decode_u64(&self.tensors[ITERATION_KEY], ITERATION_KEY)?;
        let mut adam = AdamState::new();
        adam.step = iteration;
        for d in layout.iter().filter(|d| d.trainable) {
            for (prefix, moments) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
                let t = self.tensors[&format!("{prefix}{}", d.name)].clone();
                if t.shape() != d.shape {
                    return Err(TrainError::Format(format!("{prefix}{} has shape {}", d.name, t.shape())));
                }
                moments.insert(d.name.clone(), t);
            }
        }
        Ok(TrainState {
            model,
            adam,
            iteration,
            seed: decode_u64(&self.tensors[SEED_KEY], SEED_KEY)?,
        })
    }
}
