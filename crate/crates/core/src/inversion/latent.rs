use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, fingerprint_hex, well_mae, Adam, DataLoss, DataLossConfig, InversionResult, Observations};
use super::{SampleResult, SampleStatus};
use crate::error::{Error, Result};
use crate::generator::{Generator, LabelVector, LatentVector};
use crate::rng;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentOptConfig {
    /// Independent restarts, each from its own prior draw.
    pub n_restarts: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Co-optimize the generator labels, clamped to `[0, 1]`.
    pub optimize_labels: bool,
    /// Project `z` onto the ball of radius `r·√d` after every step.
    pub ball_radius: Option<f64>,
    pub precision: Precision,
    pub loss: DataLossConfig,
}

impl Default for LatentOptConfig {
    fn default() -> Self {
        LatentOptConfig {
            n_restarts: 300,
            iterations: 1000,
            lr: 0.01,
            optimize_labels: false,
            ball_radius: None,
            precision: Precision::F32,
            loss: DataLossConfig::default(),
        }
    }
}

impl LatentOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_restarts == 0 {
            return Err(Error::invalid("latent optimization needs at least one restart"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if let Some(r) = self.ball_radius {
            if !(r > 0.0) {
                return Err(Error::invalid("ball radius must be > 0"));
            }
        }
        Ok(())
    }
}

/// Starting point of restart `i`: a prior draw keyed by `(seed, i)` and,
/// when labels are optimized, neutral labels.
pub(crate) fn restart_start<G: Generator>(
    gen: &G,
    cfg: &LatentOptConfig,
    seed: u64,
    i: usize,
) -> (LatentVector, Option<LabelVector>) {
    let mut r = rng::stream(rng::derive(seed, "latent-opt/start", i as u64), 0);
    let z = LatentVector(rng::normals(&mut r, gen.latent_dim()));
    let labels = (cfg.optimize_labels && gen.label_dim() > 0).then(|| LabelVector::neutral(gen.label_dim()));
    (z, labels)
}

/// Gradient-based search of the latent space from `n_restarts` prior draws.
/// Restarts are independent, so results do not depend on the worker count.
pub fn latent_optimize<G: Generator>(
    gen: &G,
    obs: &Observations,
    cfg: &LatentOptConfig,
    seed: u64,
) -> Result<InversionResult> {
    cfg.validate()?;
    let starts: Vec<_> = (0..cfg.n_restarts).map(|i| restart_start(gen, cfg, seed, i)).collect();
    latent_optimize_from(gen, obs, cfg, &starts, seed)
}

/// [`latent_optimize`] from explicit starting points (one restart each).
pub fn latent_optimize_from<G: Generator>(
    gen: &G,
    obs: &Observations,
    cfg: &LatentOptConfig,
    starts: &[(LatentVector, Option<LabelVector>)],
    seed: u64,
) -> Result<InversionResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let base = DataLoss::new(obs, &cfg.loss)?;
    let before = gen.params().fingerprint();
    let samples = starts
        .par_iter()
        .map(|(z, l)| optimize_one(gen, obs, &base, cfg, z, l.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let after = gen.params().fingerprint();
    assert_eq!(before, after, "latent optimization must not modify generator weights");
    Ok(InversionResult {
        method: "latent-opt".into(),
        seed,
        samples,
        weights_fingerprint: fingerprint_hex(after),
        wall_clock_s: clock.elapsed().as_secs_f64(),
    })
}

fn project_ball(z: &mut [f64], radius: f64) {
    let limit = radius * (z.len() as f64).sqrt();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        z.iter_mut().for_each(|v| *v *= limit / norm);
    }
}

fn optimize_one<G: Generator>(
    gen: &G,
    obs: &Observations,
    base: &DataLoss,
    cfg: &LatentOptConfig,
    z0: &LatentVector,
    labels0: Option<&LabelVector>,
) -> Result<SampleResult> {
    gen.check_inputs(z0, labels0)?;
    let loss = base.calibrated_at(gen, z0, labels0)?;
    let mut z = z0.0.clone();
    let mut labels = labels0.map(|l| l.values.clone());
    let opt_labels = cfg.optimize_labels && labels.is_some();
    let sizes: Vec<usize> = if opt_labels {
        vec![z.len(), labels.as_ref().map_or(0, Vec::len)]
    } else {
        vec![z.len()]
    };
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut status = SampleStatus::Converged;
    for it in 0..=cfg.iterations {
        let e = evaluate(gen, &loss, &z, labels.as_deref(), opt_labels, cfg.precision)?;
        history.push(e.loss);
        if !e.loss.is_finite() {
            log::warn!("latent optimization: non-finite loss at iteration {it}; restart aborted");
            status = SampleStatus::NonFinite { iteration: it };
            break;
        }
        if it == cfg.iterations {
            break;
        }
        match (&mut labels, e.grad_labels.as_ref()) {
            (Some(l), Some(gl)) if opt_labels => {
                adam.step(&mut [&mut z, l], &[&e.grad_z, gl]);
                l.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            _ => adam.step(&mut [&mut z], &[&e.grad_z]),
        }
        if let Some(r) = cfg.ball_radius {
            project_ball(&mut z, r);
        }
    }
    let label_vec = labels.clone().map(LabelVector::from_values).transpose()?;
    let inversion_error = match status {
        SampleStatus::Converged => well_mae(gen, &obs.wells, &LatentVector(z.clone()), label_vec.as_ref())?,
        SampleStatus::NonFinite { .. } => f64::NAN,
    };
    Ok(SampleResult {
        latent: z,
        labels,
        history,
        inversion_error,
        status,
    })
}
