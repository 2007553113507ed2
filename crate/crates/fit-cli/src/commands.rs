//! The runnable experiments behind each CLI subcommand.
//!
//! Every run derives all of its randomness (data synthesis, parameter
//! initialization, GAN noise, sampling) from the single `--seed` flag,
//! writes `metrics.csv` and `final.ckpt` into the output directory, and
//! returns the per-epoch history. The GAN run additionally writes
//! `samples.csv` with 1024 generator draws.

use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use fitcore::metrics::{MetricInput, MetricNode};
use fitcore::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::gan::{gan_loss_callback, register_gan_metrics, GanModel};
use crate::models::LinearModel;

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct CommonConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub out_dir: PathBuf,
}

/// Flags for the adversarial run.
#[derive(Debug, Clone)]
pub struct GanConfig {
    pub common: CommonConfig,
    pub latent_dim: usize,
    pub modes: usize,
}

/// Generator samples written at the end of a GAN run.
pub const GAN_SAMPLE_COUNT: usize = 1024;

// Distinct streams per purpose, all derived from --seed.
const INIT_SALT: u64 = 0x1af7_31d0_5eed_0001;
const NOISE_SALT: u64 = 0x1af7_31d0_5eed_0002;
const SAMPLE_SALT: u64 = 0x1af7_31d0_5eed_0003;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn standard_callbacks(trial: Trial, out_dir: &Path) -> Trial {
    trial
        .with_callback(csv_logger(out_dir.join("metrics.csv"), false))
        .with_callback(console_logger())
        .with_callback(checkpointer(
            out_dir.join("final.ckpt").to_string_lossy().into_owned(),
            SaveMode::EveryEpoch,
        ))
}

/// Linear regression on `y = 2x + 1 + noise` with mean squared error.
pub fn run_linreg(cfg: &CommonConfig) -> Result<History> {
    ensure_dir(&cfg.out_dir)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let model = LinearModel::new(1, &mut init_rng);
    let optimizer = Sgd::new(model.parameters(), cfg.lr, 0.0)?;
    let trial = Trial::new(model, optimizer)
        .with_criterion(Criterion::Mse)
        .with_metric_key("loss")?;
    let mut trial = standard_callbacks(trial, &cfg.out_dir)
        .with_train_generator(data::linreg_batches(cfg.seed, cfg.batch_size));
    trial.run(cfg.epochs)
}

/// Fraction of predictions on the true side of zero, for +/-1 labels.
struct SignAccuracy;

impl MetricNode for SignAccuracy {
    fn name(&self) -> &str {
        "acc"
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        let MetricInput::State(state) = input else {
            return Err(Error::Config("acc metric must be a tree root".into()));
        };
        let pred = state.get_tensor(&keys::Y_PRED)?.values();
        let truth = state.get_tensor(&keys::Y_TRUE)?.values();
        if pred.is_empty() {
            return Ok(None);
        }
        let correct = pred
            .iter()
            .zip(truth.iter())
            .filter(|(p, t)| (**p >= 0.0) == (**t >= 0.0))
            .count();
        Ok(Some(correct as f64 / pred.len() as f64))
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {}
}

/// Linear SVM on two separable blobs with hinge loss.
pub fn run_svm(cfg: &CommonConfig) -> Result<History> {
    ensure_dir(&cfg.out_dir)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let model = LinearModel::new(2, &mut init_rng);
    let optimizer = Sgd::new(model.parameters(), cfg.lr, 0.0)?;
    let trial = Trial::new(model, optimizer)
        .with_criterion(Criterion::Hinge)
        .with_metric_key("loss")?
        .with_metric_tree(standard_tree(SignAccuracy));
    let mut trial = standard_callbacks(trial, &cfg.out_dir)
        .with_train_generator(data::svm_batches(cfg.seed, cfg.batch_size));
    trial.run(cfg.epochs)
}

/// The GAN on a ring of Gaussians. No criterion is passed: the base loss
/// is the differentiable zero and the adversarial callback is the entire
/// loss.
pub fn run_gan(cfg: &GanConfig) -> Result<History> {
    let common = &cfg.common;
    ensure_dir(&common.out_dir)?;
    register_gan_metrics();

    let mut init_rng = ChaCha8Rng::seed_from_u64(common.seed ^ INIT_SALT);
    let noise_rng = ChaCha8Rng::seed_from_u64(common.seed ^ NOISE_SALT);
    let model = Rc::new(RefCell::new(GanModel::new(
        cfg.latent_dim,
        &mut init_rng,
        noise_rng,
    )));
    let params = model.borrow().parameters();
    let optimizer = Sgd::new(params, common.lr, 0.0)?;

    let trial = Trial::new_shared(model.clone(), optimizer)
        .with_metric_key("loss")?
        .with_metric_key("g_loss")?
        .with_metric_key("d_loss")?
        .with_callback(gan_loss_callback())
        .with_pass_state(true);
    let mut trial = standard_callbacks(trial, &common.out_dir).with_train_generator(
        data::ring_batches(common.seed, cfg.modes, common.batch_size),
    );
    let history = trial.run(common.epochs)?;

    let mut sample_rng = ChaCha8Rng::seed_from_u64(common.seed ^ SAMPLE_SALT);
    let samples = model.borrow().sample(GAN_SAMPLE_COUNT, &mut sample_rng);
    write_samples(&common.out_dir.join("samples.csv"), &samples)?;
    Ok(history)
}

fn write_samples(path: &Path, samples: &[[f64; 2]]) -> Result<()> {
    let mut text = String::from("x,y\n");
    for [x, y] in samples {
        text.push_str(&format!("{x},{y}\n"));
    }
    let mut file = fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a two-column samples file back into points.
pub fn read_samples(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|line| {
            let mut cells = line.split(',');
            let x = cells.next()?.parse().ok()?;
            let y = cells.next()?.parse().ok()?;
            Some([x, y])
        })
        .collect())
}
