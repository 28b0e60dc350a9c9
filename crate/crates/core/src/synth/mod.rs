//! Procedural 2.5-D scenes with exact feature buffers and Monte Carlo style noise.
//!
//! A scene is a stack of axis-aligned rectangles and disks over a background
//! plane. The top-most primitive at a pixel gives the normal, position and
//! first albedo; the one beneath it gives the second albedo. Clean radiance
//! is `albedo1 · max(0, n·l) + 0.2 · albedo2`.
//!
//! One sample of the estimator is `L · E` with `E ~ Exp(1)`, so a `k` sample
//! render is `L · G` with `G ~ Gamma(k, 1/k)`. `G` is shared by the three
//! channels of a pixel, like a path carrying a colour.
//!
//! Every random draw comes from a ChaCha stream addressed by
//! (seed, render stream, pixel), so output never depends on evaluation order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::{save_sample, write_manifest, DataError, Sample};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SPP_NOISY: u32 = 4;
pub const DEFAULT_SPP_REFERENCE: u32 = 4096;
pub const INDIRECT_WEIGHT: f32 = 0.2;

/// Random words reserved per pixel in a render stream.
const WORDS_PER_PIXEL: u128 = 64;
/// Stream id of the reference render; noisy render `r` uses stream `r + 1`.
const REFERENCE_STREAM: u64 = 0;
const NOISE_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub primitives: usize,
    pub light: [f32; 3],
    pub spp_noisy: u32,
    pub spp_reference: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid scene recipe: {0}")]
pub struct RecipeError(String);

impl SceneRecipe {
    /// Primitive count and light direction drawn from `seed`.
    pub fn from_seed(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = layout_rng(seed, 1);
        let primitives = rng.random_range(6..=14);
        let phi = rng.random_range(0.0..std::f32::consts::TAU);
        let cos_t: f32 = rng.random_range(0.35..0.95);
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        SceneRecipe {
            seed,
            height,
            width,
            primitives,
            light: [sin_t * phi.cos(), sin_t * phi.sin(), cos_t],
            spp_noisy: DEFAULT_SPP_NOISY,
            spp_reference: DEFAULT_SPP_REFERENCE,
        }
    }

    pub fn with_spp(mut self, noisy: u32, reference: u32) -> Self {
        self.spp_noisy = noisy;
        self.spp_reference = reference;
        self
    }

    pub fn validate(&self) -> Result<(), RecipeError> {
        if self.height == 0 || self.width == 0 {
            return Err(RecipeError(format!("resolution {}x{}", self.height, self.width)));
        }
        if self.spp_noisy < 1 {
            return Err(RecipeError("spp_noisy must be at least 1".into()));
        }
        if self.spp_reference < self.spp_noisy {
            return Err(RecipeError(format!(
                "spp_reference {} below spp_noisy {}",
                self.spp_reference, self.spp_noisy
            )));
        }
        let norm = self.light.iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(RecipeError(format!("light direction has length {norm}")));
        }
        Ok(())
    }
}

fn layout_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[derive(Debug, Clone, Copy)]
enum Footprint {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Disk { cy: f32, cx: f32, r: f32 },
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Flat([f32; 3]),
    Gradient { a: [f32; 3], b: [f32; 3], dir: [f32; 2], origin: [f32; 2], span: f32 },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Footprint,
    texture: Texture,
    tilt: [f32; 2],
    bump: f32,
    height: f32,
}

struct Hit {
    normal: [f32; 3],
    z: f32,
    albedo: [f32; 3],
}

impl Primitive {
    fn hit(&self, y: f32, x: f32) -> Option<Hit> {
        let (gx, gy) = match self.shape {
            Footprint::Rect { y0, x0, y1, x1 } => {
                if y < y0 || y >= y1 || x < x0 || x >= x1 {
                    return None;
                }
                (self.tilt[0], self.tilt[1])
            }
            Footprint::Disk { cy, cx, r } => {
                let (dy, dx) = ((y - cy) / r, (x - cx) / r);
                if dx * dx + dy * dy >= 1.0 {
                    return None;
                }
                (self.tilt[0] + self.bump * dx, self.tilt[1] + self.bump * dy)
            }
        };
        let len = (gx * gx + gy * gy + 1.0).sqrt();
        let dome = match self.shape {
            Footprint::Disk { cy, cx, r } => {
                let d2 = ((y - cy) / r).powi(2) + ((x - cx) / r).powi(2);
                0.5 * self.bump * r * (1.0 - d2)
            }
            Footprint::Rect { .. } => 0.0,
        };
        Some(Hit {
            normal: [-gx / len, -gy / len, 1.0 / len],
            z: self.height + dome + self.tilt[0] * x + self.tilt[1] * y,
            albedo: self.texture.at(y, x),
        })
    }
}

impl Texture {
    fn at(&self, y: f32, x: f32) -> [f32; 3] {
        match *self {
            Texture::Flat(c) => c,
            Texture::Gradient { a, b, dir, origin, span } => {
                let t = (((x - origin[0]) * dir[0] + (y - origin[1]) * dir[1]) / span).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
            }
        }
    }
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(0.05..0.95))
}

fn random_texture(rng: &mut ChaCha8Rng, origin: [f32; 2], span: f32) -> Texture {
    let a = random_albedo(rng);
    if rng.random_bool(0.5) {
        Texture::Flat(a)
    } else {
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        Texture::Gradient {
            a,
            b: random_albedo(rng),
            dir: [angle.cos(), angle.sin()],
            origin,
            span,
        }
    }
}

/// Analytic buffers of a scene, before any sampling.
#[derive(Clone)]
pub struct Scene {
    pub recipe: SceneRecipe,
    /// `1×12×h×w` noise-free features.
    pub features: Tensor<f32>,
    /// `1×3×h×w` clean radiance.
    pub radiance: Tensor<f32>,
}

fn build_primitives(recipe: &SceneRecipe) -> Vec<Primitive> {
    let mut rng = layout_rng(recipe.seed, 2);
    let aspect = recipe.width as f32 / recipe.height as f32;
    let mut prims = vec![Primitive {
        shape: Footprint::Rect {
            y0: f32::NEG_INFINITY,
            x0: f32::NEG_INFINITY,
            y1: f32::INFINITY,
            x1: f32::INFINITY,
        },
        texture: random_texture(&mut rng, [0.0, 0.0], aspect.max(1.0)),
        tilt: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
        bump: 0.0,
        height: 0.0,
    }];
    for layer in 1..=recipe.primitives {
        let height = layer as f32 * 0.1;
        let tilt = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
        let prim = if rng.random_bool(0.5) {
            let hh = rng.random_range(0.1..0.45);
            let hw = rng.random_range(0.1..0.45) * aspect;
            let y0 = rng.random_range(-0.1..1.0 - hh * 0.5);
            let x0 = rng.random_range(-0.1..aspect - hw * 0.5);
            Primitive {
                shape: Footprint::Rect {
                    y0,
                    x0,
                    y1: y0 + hh,
                    x1: x0 + hw,
                },
                texture: random_texture(&mut rng, [x0, y0], hh.max(hw)),
                tilt,
                bump: 0.0,
                height,
            }
        } else {
            let r = rng.random_range(0.05..0.25);
            let cy = rng.random_range(0.0..1.0);
            let cx = rng.random_range(0.0..aspect);
            Primitive {
                shape: Footprint::Disk { cy, cx, r },
                texture: random_texture(&mut rng, [cx - r, cy - r], 2.0 * r),
                tilt: [tilt[0] * 0.3, tilt[1] * 0.3],
                bump: rng.random_range(0.5..2.0),
                height,
            }
        };
        prims.push(prim);
    }
    prims
}

/// Analytic scene for `recipe`.
pub fn build_scene(recipe: &SceneRecipe) -> Result<Scene, RecipeError> {
    recipe.validate()?;
    let (h, w) = (recipe.height, recipe.width);
    let prims = build_primitives(recipe);
    let plane = h * w;
    let mut features = vec![0.0f32; 12 * plane];
    let mut radiance = vec![0.0f32; 3 * plane];
    let l = recipe.light;
    for py in 0..h {
        for px in 0..w {
            // unit-height image, world y grows downwards
            let y = (py as f32 + 0.5) / h as f32;
            let x = (px as f32 + 0.5) / h as f32;
            let mut hits = prims.iter().rev().filter_map(|p| p.hit(y, x));
            let top = hits.next().expect("background covers every pixel");
            let below = hits.next().map(|hit| hit.albedo).unwrap_or(top.albedo);
            let i = py * w + px;
            let pos = [x, y, top.z];
            for k in 0..3 {
                features[k * plane + i] = top.normal[k];
                features[(3 + k) * plane + i] = pos[k];
                features[(6 + k) * plane + i] = top.albedo[k];
                features[(9 + k) * plane + i] = below[k];
            }
            let shade = (top.normal[0] * l[0] + top.normal[1] * l[1] + top.normal[2] * l[2]).max(0.0);
            for k in 0..3 {
                radiance[k * plane + i] = top.albedo[k] * shade + INDIRECT_WEIGHT * below[k];
            }
        }
    }
    Ok(Scene {
        recipe: recipe.clone(),
        features: Tensor::from_vec(Shape::new(1, 12, h, w), features).expect("feature shape"),
        radiance: Tensor::from_vec(Shape::new(1, 3, h, w), radiance).expect("radiance shape"),
    })
}

impl Scene {
    /// `spp`-sample render from noise stream `stream`.
    pub fn render(&self, spp: u32, stream: u64) -> Tensor<f32> {
        let s = self.radiance.shape();
        let plane = s.plane();
        let gamma = Gamma::new(spp as f64, 1.0 / spp as f64).expect("spp >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(self.recipe.seed ^ NOISE_KEY);
        rng.set_stream(stream);
        let mut out = vec![0.0f32; s.numel()];
        for p in 0..plane {
            rng.set_word_pos(p as u128 * WORDS_PER_PIXEL);
            let g = gamma.sample(&mut rng) as f32;
            for c in 0..3 {
                out[c * plane + p] = self.radiance.data()[c * plane + p] * g;
            }
        }
        Tensor::from_vec(s, out).expect("render shape")
    }

    /// Noisy render `index` at the recipe's noisy sample count.
    pub fn noisy(&self, index: u64) -> Tensor<f32> {
        self.render(self.recipe.spp_noisy, index + 1)
    }

    pub fn reference(&self) -> Tensor<f32> {
        self.render(self.recipe.spp_reference, REFERENCE_STREAM)
    }

    pub fn sample(&self) -> Sample {
        Sample {
            noisy: self.noisy(0),
            features: self.features.clone(),
            reference: Some(self.reference()),
        }
    }
}

pub fn generate_scene(recipe: &SceneRecipe) -> Result<Sample, RecipeError> {
    Ok(build_scene(recipe)?.sample())
}

/// Shared settings for every scene of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub spp_noisy: u32,
    pub spp_reference: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 96,
            width: 96,
            spp_noisy: DEFAULT_SPP_NOISY,
            spp_reference: DEFAULT_SPP_REFERENCE,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Writes `n_scenes` sample directories and `manifest.txt` under `out_dir`.
/// Scene `i` uses seed `base_seed + i`.
pub fn generate_dataset(
    out_dir: impl AsRef<Path>,
    n_scenes: usize,
    base_seed: u64,
    config: DatasetConfig,
) -> Result<PathBuf, DataError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let recipes: Vec<SceneRecipe> = (0..n_scenes)
        .map(|i| {
            SceneRecipe::from_seed(base_seed.wrapping_add(i as u64), config.height, config.width)
                .with_spp(config.spp_noisy, config.spp_reference)
        })
        .collect();
    for r in &recipes {
        r.validate().map_err(|e| DataError::Manifest(e.to_string()))?;
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_scenes.max(1));
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let recipes = &recipes;
                scope.spawn(move || -> Result<(), DataError> {
                    for (i, r) in recipes.iter().enumerate().skip(t).step_by(threads) {
                        let sample = generate_scene(r).map_err(|e| DataError::Manifest(e.to_string()))?;
                        save_sample(out_dir.join(scene_dir_name(i)), &sample)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("generator thread panicked"))
    })?;
    let entries: Vec<PathBuf> = (0..n_scenes).map(|i| PathBuf::from(scene_dir_name(i))).collect();
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_sample, read_manifest};

    fn recipe(seed: u64) -> SceneRecipe {
        SceneRecipe::from_seed(seed, 24, 32)
    }

    #[test]
    fn same_seed_same_sample() {
        let a = generate_scene(&recipe(5)).unwrap();
        let b = generate_scene(&recipe(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.noisy, generate_scene(&recipe(6)).unwrap().noisy);
    }

    #[test]
    fn recipe_validation() {
        assert!(recipe(0).validate().is_ok());
        assert!(recipe(0).with_spp(0, 4).validate().is_err());
        assert!(recipe(0).with_spp(8, 4).validate().is_err());
        let mut r = recipe(0);
        r.light = [1.0, 1.0, 0.0];
        assert!(r.validate().is_err());
    }

    #[test]
    fn features_are_unit_normals_and_noise_free() {
        let scene = build_scene(&recipe(2)).unwrap();
        let f = &scene.features;
        for p in 0..f.shape().plane() {
            let n2: f32 = (0..3).map(|c| f.plane(0, c)[p].powi(2)).sum();
            assert!((n2 - 1.0).abs() < 1e-5);
            assert!(f.plane(0, 2)[p] > 0.0);
        }
        let low = build_scene(&recipe(2).with_spp(1, 1)).unwrap();
        assert_eq!(low.features, scene.features);
    }

    #[test]
    fn radiance_is_non_negative_and_varied() {
        let scene = build_scene(&recipe(9)).unwrap();
        let d = scene.radiance.data();
        assert!(d.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let min = d.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = d.iter().cloned().fold(0.0, f32::max);
        assert!(max - min > 0.1);
    }

    #[test]
    fn renders_are_unbiased() {
        let scene = build_scene(&SceneRecipe::from_seed(3, 4, 4)).unwrap();
        let renders = 100_000u64;
        let n = scene.radiance.len();
        let mut sum = vec![0.0f64; n];
        for r in 0..renders {
            for (s, v) in sum.iter_mut().zip(scene.noisy(r).data()) {
                *s += *v as f64;
            }
        }
        // channels of a pixel share one draw, so pixels are the independent units
        let plane = scene.radiance.shape().plane();
        let mut z_sum = 0.0;
        for p in 0..plane {
            let l = scene.radiance.data()[p] as f64;
            let mean = sum[p] / renders as f64;
            let sigma = l / (scene.recipe.spp_noisy as f64 * renders as f64).sqrt();
            let z = (mean - l) / sigma;
            assert!(z.abs() < 4.5, "pixel {p}: {mean} vs {l}");
            z_sum += z;
        }
        let aggregate = z_sum / (plane as f64).sqrt();
        assert!(aggregate.abs() <= 3.0, "aggregate z {aggregate}");
    }

    #[test]
    fn variance_scales_inverse_with_spp() {
        let scene = build_scene(&SceneRecipe::from_seed(4, 32, 32)).unwrap();
        let relvar = |spp: u32| {
            let mut acc = 0.0f64;
            let mut count = 0.0;
            for r in 0..64 {
                let img = scene.render(spp, r + 1);
                for (v, l) in img.data().iter().zip(scene.radiance.data()) {
                    if *l > 1e-3 {
                        acc += ((*v as f64 - *l as f64) / *l as f64).powi(2);
                        count += 1.0;
                    }
                }
            }
            acc / count
        };
        let ratio = relvar(4) / relvar(16);
        assert!((ratio - 4.0).abs() <= 0.8, "variance ratio {ratio}");
    }

    #[test]
    fn reference_is_much_closer_than_noisy() {
        let scene = build_scene(&recipe(11)).unwrap();
        let rel = |img: &Tensor<f32>| {
            img.data()
                .iter()
                .zip(scene.radiance.data())
                .map(|(p, r)| ((p - r) as f64).powi(2) / ((*r as f64).powi(2) + 1e-3))
                .sum::<f64>()
        };
        let noisy = rel(&scene.noisy(0));
        let reference = rel(&scene.reference());
        let bound = scene.recipe.spp_reference as f64 / scene.recipe.spp_noisy as f64 * 0.5;
        assert!(noisy / reference >= bound, "{noisy} / {reference}");
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            height: 16,
            width: 20,
            ..Default::default()
        };
        let m = generate_dataset(a.path(), 8, 7, cfg).unwrap();
        generate_dataset(b.path(), 8, 7, cfg).unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries.len(), 8);
        for (i, e) in entries.iter().enumerate() {
            let s = load_sample(e).unwrap();
            assert_eq!((s.height(), s.width()), (16, 20));
            for f in ["color.pfm", "albedo2.pfm", "reference.pfm"] {
                let name = scene_dir_name(i);
                let x = std::fs::read(a.path().join(&name).join(f)).unwrap();
                let y = std::fs::read(b.path().join(&name).join(f)).unwrap();
                assert_eq!(x, y);
            }
        }
        let direct = generate_scene(
            &SceneRecipe::from_seed(7 + 3, 16, 20).with_spp(cfg.spp_noisy, cfg.spp_reference),
        )
        .unwrap();
        assert_eq!(load_sample(&entries[3]).unwrap(), direct);
    }
}
