//! Stochastic gradient training with saturation-penalty annealing.
//!
//! Training walks a schedule of `(alpha, epochs)` stages with non-decreasing
//! penalty weights, warm-starting every stage from the previous one: the
//! pure reconstruction solution found at `alpha = 0` is deformed gradually
//! instead of being re-learned under a full-strength penalty. Updates are
//! plain per-sample SGD; optionally the decoder columns are rescaled to unit
//! norm every `reproject_every` updates, which stops the trivial escape of
//! shrinking codes and inflating decoder weights.

use std::io;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{ModelError, ModelParams};
use crate::nonlin::Nonlinearity;
use crate::seed::{stream_rng, SeedStream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("decoder reprojection is undefined for tied weights")]
    TiedModeReprojection,
    #[error("loss became non-finite during the alpha={alpha} stage, epoch {epoch}")]
    NonFiniteLoss { alpha: f64, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One annealing stage: train `epochs` epochs at penalty weight `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub alpha: f64,
    pub epochs: usize,
}

/// Training hyper-parameters. Serializes as JSON; missing fields take the
/// defaults below, unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// SGD step size.
    pub lr: f64,
    /// Annealing schedule; alphas must be non-decreasing.
    pub alpha_schedule: Vec<Stage>,
    /// Rescale decoder columns to unit norm every this many updates
    /// (counted across the whole run). `None` disables reprojection.
    pub reproject_every: Option<u64>,
    /// Share one weight matrix between encoder and decoder.
    pub tied: bool,
    /// Master seed; initialization and shuffling use separate streams of it.
    pub seed: u64,
    /// Weights initialize uniformly in `[-init_scale, init_scale)`.
    pub init_scale: f64,
    /// Visit samples in a fresh random order each epoch. When off, epochs
    /// sweep the dataset in storage order.
    pub shuffle: bool,
    /// Learn a decoder bias. When off it stays zero.
    pub dec_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            alpha_schedule: (0..=10)
                .map(|k| Stage { alpha: k as f64 / 10.0, epochs: 30 })
                .collect(),
            reproject_every: Some(10),
            tied: false,
            seed: 0,
            init_scale: 0.05,
            shuffle: true,
            dec_bias: true,
        }
    }
}

impl TrainConfig {
    /// Per-activation defaults: the saturating-linear activation trains tied
    /// and without reprojection (its penalty pushes weights outward, not
    /// codes to zero); the identity gets no reprojection either. Shrink and
    /// rectified-linear keep the standard settings.
    pub fn default_for(f: &Nonlinearity) -> Self {
        let mut cfg = TrainConfig::default();
        match f {
            Nonlinearity::SaturatedLinear { .. } => {
                cfg.tied = true;
                cfg.reproject_every = None;
            }
            Nonlinearity::Linear | Nonlinearity::Tabulated(_) => {
                cfg.reproject_every = None;
            }
            _ => {}
        }
        cfg
    }

    /// Parse and validate a JSON config.
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            serde_json::from_str(s).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "init_scale must be >= 0, got {}",
                self.init_scale
            )));
        }
        if self.alpha_schedule.is_empty() {
            return Err(TrainError::InvalidConfig("alpha schedule is empty".into()));
        }
        let mut prev = 0.0_f64;
        for (i, stage) in self.alpha_schedule.iter().enumerate() {
            if !(stage.alpha >= 0.0 && stage.alpha.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {i}: alpha must be >= 0, got {}",
                    stage.alpha
                )));
            }
            if stage.alpha < prev {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {i}: alpha {} decreases from {prev}",
                    stage.alpha
                )));
            }
            if stage.epochs == 0 {
                return Err(TrainError::InvalidConfig(format!("stage {i}: epochs must be >= 1")));
            }
            prev = stage.alpha;
        }
        if self.reproject_every == Some(0) {
            return Err(TrainError::InvalidConfig("reproject_every must be >= 1".into()));
        }
        if self.tied && self.reproject_every.is_some() {
            return Err(TrainError::TiedModeReprojection);
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub alpha: f64,
    /// 1-based epoch index within its stage.
    pub epoch: usize,
    /// Mean reconstruction energy over the epoch's samples (measured at visit
    /// time, before each update).
    pub recon_mean: f64,
    /// Mean unweighted saturation penalty.
    pub sat_mean: f64,
    /// Mean fraction of hidden units sitting inside the saturation set.
    pub sat_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with the fixed header `alpha,epoch,recon_mean,sat_mean,sat_frac`
    /// and full-precision floats.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "alpha,epoch,recon_mean,sat_mean,sat_frac")?;
        for r in &self.records {
            writeln!(
                w,
                "{:.16e},{},{:.16e},{:.16e},{:.16e}",
                r.alpha, r.epoch, r.recon_mean, r.sat_mean, r.sat_frac
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("vec write");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Fresh parameters for a `d -> d_h -> d` model: weights uniform in
/// `[-init_scale, init_scale)` from the init stream of `cfg.seed` (encoder
/// row-major first, then the decoder when untied), biases zero.
pub fn init_params(d: usize, d_h: usize, cfg: &TrainConfig) -> ModelParams {
    let mut rng = stream_rng(cfg.seed, SeedStream::Init);
    let s = cfg.init_scale;
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| if s == 0.0 { 0.0 } else { rng.random_range(-s..s) }).collect()
    };
    let enc = Array2::from_shape_vec((d_h, d), draw(d_h * d)).expect("length matches shape");
    if cfg.tied {
        ModelParams::new_tied(enc, Array1::zeros(d_h), Array1::zeros(d))
    } else {
        let dec = Array2::from_shape_vec((d, d_h), draw(d * d_h)).expect("length matches shape");
        ModelParams::new(enc, Array1::zeros(d_h), dec, Array1::zeros(d))
    }
    .expect("dimensions are consistent by construction")
}

/// Rescale every decoder column to unit Euclidean norm. Columns with norm
/// below 1e-12 are left alone rather than blown up. Tied models have no
/// independent decoder to rescale, so the call is rejected.
pub fn reproject_decoder(p: &mut ModelParams) -> Result<(), TrainError> {
    if p.tied() {
        return Err(TrainError::TiedModeReprojection);
    }
    for mut col in p.dec_weight.axis_iter_mut(Axis(1)) {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok(())
}

/// One pass over the dataset at a fixed `alpha`: per-sample SGD updates in
/// shuffled (or storage) order, with reprojection every `cfg.reproject_every`
/// updates counted via `update_counter` across epochs. Returns the epoch's
/// log record; diagnostics are measured before each update.
#[allow(clippy::too_many_arguments)]
pub fn sgd_epoch<R: Rng>(
    p: &mut ModelParams,
    f: &Nonlinearity,
    alpha: f64,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    update_counter: &mut u64,
    rng: &mut R,
) -> Result<EpochRecord, TrainError> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    let d_h = p.hidden_dim() as f64;
    let (mut recon_sum, mut sat_sum, mut frac_sum) = (0.0, 0.0, 0.0);
    for &idx in &order {
        let x = data.row(idx);
        let (mut g, stats) = p.loss_grad_stats(f, alpha, x)?;
        if !(stats.recon + alpha * stats.sat).is_finite() {
            return Err(TrainError::NonFiniteLoss { alpha, epoch });
        }
        recon_sum += stats.recon;
        sat_sum += stats.sat;
        frac_sum += stats.saturated as f64 / d_h;
        if !cfg.dec_bias {
            g.dec_bias.fill(0.0);
        }
        p.apply_update(&g, cfg.lr);
        *update_counter += 1;
        if let Some(k) = cfg.reproject_every {
            if *update_counter % k == 0 {
                reproject_decoder(p)?;
            }
        }
    }
    let nf = n as f64;
    Ok(EpochRecord {
        alpha,
        epoch,
        recon_mean: recon_sum / nf,
        sat_mean: sat_sum / nf,
        sat_frac: frac_sum / nf,
    })
}

/// Run the full annealing schedule and return the trained parameters with
/// one log record per epoch. Fully deterministic in `cfg.seed`.
pub fn train(
    f: &Nonlinearity,
    data: &Dataset,
    d_h: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog), TrainError> {
    cfg.validate()?;
    if d_h == 0 {
        return Err(TrainError::InvalidConfig("hidden dimension must be >= 1".into()));
    }
    let mut p = init_params(data.dim(), d_h, cfg);
    let mut rng = stream_rng(cfg.seed, SeedStream::Shuffle);
    let mut counter = 0_u64;
    let mut log = TrainLog::default();
    for stage in &cfg.alpha_schedule {
        for epoch in 1..=stage.epochs {
            log.records.push(sgd_epoch(
                &mut p,
                f,
                stage.alpha,
                data,
                cfg,
                epoch,
                &mut counter,
                &mut rng,
            )?);
        }
    }
    Ok((p, log))
}
