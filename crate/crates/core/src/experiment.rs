//! Desk-scale train-and-evaluate protocol on synthetic scenes, shared by the
//! variant comparison example and the acceptance tests.

use std::time::{Duration, Instant};

use crate::cli::model_spec;
use crate::data::Sample;
use crate::metrics::{evaluate, evaluate_noisy, EvalReport, MetricError};
use crate::net::{Model, Variant};
use crate::synth::{generate_scene, SceneRecipe};
use crate::train::{TrainConfig, TrainError, TrainSet, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub size: usize,
    /// Scene `i` is rendered from seed `scene_seed + i`; test scenes follow
    /// the training scenes.
    pub scene_seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub width_scale: f64,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            train_scenes: 32,
            test_scenes: 8,
            size: 96,
            scene_seed: 1000,
            iterations: 5000,
            batch_size: 1,
            patch_size: 64,
            patch_stride: 32,
            width_scale: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("scene generation: {0}")]
    Scene(String),
}

/// Rendered scenes, split into training and held-out parts.
pub struct Scenes {
    pub train: Vec<(String, Sample)>,
    pub test: Vec<(String, Sample)>,
}

pub struct RunResult {
    pub variant: Variant,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub report: EvalReport,
    pub model: Model<f32>,
    pub elapsed: Duration,
}

impl Protocol {
    pub fn scenes(&self) -> Result<Scenes, ExperimentError> {
        let render = |i: usize| {
            let recipe = SceneRecipe::from_seed(self.scene_seed + i as u64, self.size, self.size);
            generate_scene(&recipe)
                .map(|s| (format!("scene_{i:04}"), s))
                .map_err(|e| ExperimentError::Scene(e.to_string()))
        };
        let all = (0..self.train_scenes + self.test_scenes)
            .map(render)
            .collect::<Result<Vec<_>, _>>()?;
        let mut train = all;
        let test = train.split_off(self.train_scenes);
        Ok(Scenes { train, test })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_iterations: self.iterations,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            patch_stride: self.patch_stride,
            seed: self.seed,
            deterministic: true,
            checkpoint_every: 0,
            validate_every: 0,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    /// Trains `variant` on the training scenes and scores it on the held-out
    /// ones. `progress` sees every log record.
    pub fn run(
        &self,
        variant: Variant,
        scenes: &Scenes,
        mut progress: impl FnMut(u64, f64),
    ) -> Result<RunResult, ExperimentError> {
        let start = Instant::now();
        let set = TrainSet::from_samples(&scenes.train, self.patch_size, self.patch_stride)?;
        let spec = model_spec(variant, self.width_scale, self.seed);
        let mut trainer = Trainer::new(spec, set, None, self.train_config())?;
        let mut last = f64::NAN;
        for _ in 0..self.iterations {
            let r = trainer.step()?;
            last = r.train_loss;
            progress(r.iteration, r.train_loss);
        }
        let model = trainer.model().clone();
        let report = evaluate(&model, &scenes.test, variant.label())?;
        Ok(RunResult {
            variant,
            param_count: model.param_count(),
            final_train_loss: last,
            report,
            model,
            elapsed: start.elapsed(),
        })
    }

    pub fn noisy_baseline(&self, scenes: &Scenes) -> Result<EvalReport, ExperimentError> {
        Ok(evaluate_noisy(&scenes.test)?)
    }
}

/// `variant  params  RelMSE  SSIM  minutes` rows.
pub fn summary_table(noisy: &EvalReport, runs: &[RunResult]) -> String {
    let mut out = format!("{:<10} {:>10} {:>10} {:>8} {:>8}\n", "model", "params", "RelMSE", "SSIM", "minutes");
    out += &format!("{:<10} {:>10} {:>10.5} {:>8.4} {:>8}\n", "noisy", "-", noisy.mean_relmse(), noisy.mean_ssim(), "-");
    for r in runs {
        out += &format!(
            "{:<10} {:>10} {:>10.5} {:>8.4} {:>8.1}\n",
            r.variant.label(),
            r.param_count,
            r.report.mean_relmse(),
            r.report.mean_ssim(),
            r.elapsed.as_secs_f64() / 60.0
        );
    }
    out
}
