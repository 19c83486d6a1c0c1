//! Pivotal tuning: with latent "pivots" from a previous inversion held
//! fixed, fine-tune the generator weights to close the remaining data
//! mismatch. A locality anchor keeps the tuned generator close to the
//! original on interpolations between the pivots and fresh prior draws.

use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fingerprint_hex, well_mae, Adam, DataLoss, DataLossConfig, InversionResult, Observations};
use super::{SampleResult, SampleStatus};
use crate::error::{Error, Result};
use crate::generator::{Generator, LabelVector, LatentVector, ParamSet};
use crate::rng;
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// One tuned generator for all pivots.
    #[default]
    Shared,
    /// An independently tuned generator per pivot.
    PerPivot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PivotalConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the locality anchor.
    pub lambda_loc: f64,
    /// Anchor latents drawn per step.
    pub anchors_per_step: usize,
    pub mode: TuningMode,
    /// Include the data term (disable to test the pure anchor objective).
    pub fit_data: bool,
    pub precision: Precision,
    pub loss: DataLossConfig,
}

impl Default for PivotalConfig {
    fn default() -> Self {
        PivotalConfig {
            steps: 400,
            lr: 3e-3,
            lambda_loc: 0.1,
            anchors_per_step: 4,
            mode: TuningMode::Shared,
            fit_data: true,
            precision: Precision::F32,
            loss: DataLossConfig::default(),
        }
    }
}

impl PivotalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lambda_loc >= 0.0) {
            return Err(Error::invalid("pivotal tuning needs lr > 0 and lambda_loc >= 0"));
        }
        if !self.fit_data && (self.lambda_loc == 0.0 || self.anchors_per_step == 0) {
            return Err(Error::invalid("pivotal tuning without data term needs an active anchor"));
        }
        Ok(())
    }
}

/// Tuned weights (one set in shared mode, one per pivot otherwise) and the
/// pivots re-evaluated with them.
#[derive(Clone, Debug)]
pub struct PivotalOutcome {
    pub weights: Vec<ParamSet>,
    pub result: InversionResult,
}

type Pivot = (LatentVector, Option<LabelVector>);

/// Fine-tunes the generator weights around fixed pivots. The input
/// generator is never modified; tuned weights are returned.
pub fn pivotal_tune<G: Generator>(
    gen: &G,
    pivots: &[Pivot],
    obs: &Observations,
    cfg: &PivotalConfig,
    seed: u64,
) -> Result<PivotalOutcome> {
    cfg.validate()?;
    if pivots.is_empty() {
        return Err(Error::invalid(
            "pivotal tuning needs pivots from a previous inversion; random starts are not accepted",
        ));
    }
    for (z, l) in pivots {
        gen.check_inputs(z, l.as_ref())?;
    }
    let clock = Instant::now();
    let before = gen.params().fingerprint();
    let base = DataLoss::new(obs, &cfg.loss)?;
    let losses = pivots
        .iter()
        .map(|(z, l)| base.calibrated_at(gen, z, l.as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let (weights, samples) = match cfg.mode {
        TuningMode::Shared => {
            let idx: Vec<usize> = (0..pivots.len()).collect();
            let (theta, hist) = tune(gen, pivots, &losses, &idx, cfg, rng::derive(seed, "pivotal/shared", 0))?;
            let tuned = gen.with_params(theta.clone())?;
            let samples = idx
                .iter()
                .map(|&i| finish(&tuned, obs, &pivots[i], hist.iter().map(|h| h[i]).collect()))
                .collect::<Result<Vec<_>>>()?;
            (vec![theta], samples)
        }
        TuningMode::PerPivot => {
            let out = (0..pivots.len())
                .into_par_iter()
                .map(|i| {
                    let (theta, hist) =
                        tune(gen, pivots, &losses, &[i], cfg, rng::derive(seed, "pivotal/pivot", i as u64))?;
                    let tuned = gen.with_params(theta.clone())?;
                    let s = finish(&tuned, obs, &pivots[i], hist.iter().map(|h| h[0]).collect())?;
                    Ok((theta, s))
                })
                .collect::<Result<Vec<_>>>()?;
            out.into_iter().unzip()
        }
    };
    assert_eq!(before, gen.params().fingerprint(), "pivotal tuning must work on a copy of the weights");
    let fp = weights.iter().fold(0u64, |h, w| h.rotate_left(5) ^ w.fingerprint());
    Ok(PivotalOutcome {
        weights,
        result: InversionResult {
            method: "pivotal-tuning".into(),
            seed,
            samples,
            weights_fingerprint: fingerprint_hex(fp),
            wall_clock_s: clock.elapsed().as_secs_f64(),
        },
    })
}

fn finish<G: Generator>(tuned: &G, obs: &Observations, pivot: &Pivot, history: Vec<f64>) -> Result<SampleResult> {
    let finite = history.iter().all(|v| v.is_finite());
    let inversion_error = if finite {
        well_mae(tuned, &obs.wells, &pivot.0, pivot.1.as_ref())?
    } else {
        f64::NAN
    };
    let status = match history.iter().position(|v| !v.is_finite()) {
        None => SampleStatus::Converged,
        Some(iteration) => SampleStatus::NonFinite { iteration },
    };
    Ok(SampleResult {
        latent: pivot.0 .0.clone(),
        labels: pivot.1.as_ref().map(|l| l.values.clone()),
        history,
        inversion_error,
        status,
    })
}

/// Anchor latents of one step: `α·pivot + (1 − α)·prior draw`.
fn anchors(pivots: &[Pivot], idx: &[usize], n: usize, seed: u64, step: usize) -> Vec<Pivot> {
    let mut r = rng::stream(seed, step as u64);
    (0..n)
        .map(|_| {
            let p = &pivots[idx[r.gen_range(0..idx.len())]];
            let alpha: f64 = r.gen();
            let prior = rng::normals(&mut r, p.0.dim());
            let z = p.0 .0.iter().zip(&prior).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            (LatentVector(z), p.1.clone())
        })
        .collect()
}

fn record_inputs(tape: &mut Tape, p: &Pivot) -> (Var, Option<Var>) {
    let z = tape.constant(p.0.to_tensor());
    let l = p
        .1
        .as_ref()
        .filter(|l| !l.is_empty())
        .map(|l| tape.constant(Tensor::from_vec(l.values.clone())));
    (z, l)
}

/// Adam on the weights for the pivots in `idx`. Returns the tuned weights
/// and, per step (plus the final state), the data loss of each pivot.
fn tune<G: Generator>(
    gen: &G,
    pivots: &[Pivot],
    losses: &[DataLoss],
    idx: &[usize],
    cfg: &PivotalConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<Vec<f64>>)> {
    let mut theta = gen.params().clone();
    let mut adam = Adam::new(cfg.lr, &theta.tensors().map(Tensor::numel).collect::<Vec<_>>());
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let current = gen.with_params(theta.clone())?;
        let mut tape = Tape::new(cfg.precision);
        let pv = current.param_vars(&mut tape, true);
        let mut total: Option<Var> = None;
        let mut per_pivot = Vec::with_capacity(idx.len());
        if cfg.fit_data {
            for &i in idx {
                let (z, l) = record_inputs(&mut tape, &pivots[i]);
                let out = current.forward(&mut tape, z, l, &pv)?;
                let v = losses[i].record(&mut tape, out, None)?.total;
                per_pivot.push(tape.value(v).item());
                total = Some(match total {
                    None => v,
                    Some(t) => tape.add(t, v)?,
                });
            }
        } else {
            per_pivot.resize(idx.len(), 0.0);
        }
        history.push(per_pivot);
        if step == cfg.steps {
            break;
        }
        if cfg.lambda_loc > 0.0 && cfg.anchors_per_step > 0 {
            let mut anchor_sum: Option<Var> = None;
            for a in anchors(pivots, idx, cfg.anchors_per_step, seed, step) {
                let reference = gen.generate_with(&a.0, a.1.as_ref(), cfg.precision)?;
                let (z, l) = record_inputs(&mut tape, &a);
                let out = current.forward(&mut tape, z, l, &pv)?;
                let mut term: Option<Var> = None;
                for (v, t) in [(out.coarse, &reference.coarse_fraction), (out.depo, &reference.depo_time)] {
                    let shape = tape.shape(v).to_vec();
                    let t = tape.constant(t.clone().reshape(shape)?);
                    let diff = tape.sub(v, t)?;
                    let sq = tape.square(diff);
                    let m = tape.mean(sq);
                    term = Some(match term {
                        None => m,
                        Some(x) => tape.add(x, m)?,
                    });
                }
                let term = term.expect("two channels");
                anchor_sum = Some(match anchor_sum {
                    None => term,
                    Some(s) => tape.add(s, term)?,
                });
            }
            let anchor = tape.scale(anchor_sum.expect("anchors >= 1"), cfg.lambda_loc / cfg.anchors_per_step as f64);
            total = Some(match total {
                None => anchor,
                Some(t) => tape.add(t, anchor)?,
            });
        }
        let Some(total) = total else { break };
        let value = tape.value(total).item();
        if !value.is_finite() {
            log::warn!("pivotal tuning: non-finite loss at step {step}; tuning stopped");
            break;
        }
        let g = tape.backward(total, &Tensor::scalar(1.0))?;
        let grads: Vec<Vec<f64>> = pv.iter().map(|v| g.wrt(*v).into_data()).collect();
        let mut blocks: Vec<&mut [f64]> = theta.tensors_mut().map(Tensor::data_mut).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut blocks, &refs);
    }
    Ok((theta, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Architecture, GridGeometry, NeuralGenerator};
    use crate::survey::extract_well_data;

    fn setup() -> (NeuralGenerator, Vec<Pivot>, Observations) {
        let arch = Architecture::tiny(4, 0);
        let gen = NeuralGenerator::random(arch, 5).unwrap();
        let z = LatentVector(vec![0.2, -0.4, 0.9, 0.1]);
        let truth = gen.generate(&z, None).unwrap();
        let g: GridGeometry = gen.geometry();
        let locs = [(0, 0), (g.nx - 1, g.ny / 2)];
        let obs = Observations {
            wells: extract_well_data(&truth, &locs).unwrap(),
            seismic: None,
        };
        (gen, vec![(z, None)], obs)
    }

    #[test]
    fn absent_pivots_rejected() {
        let (gen, _, obs) = setup();
        assert!(pivotal_tune(&gen, &[], &obs, &PivotalConfig::default(), 0).is_err());
    }

    #[test]
    fn matching_pivots_are_stationary() {
        let (gen, pivots, obs) = setup();
        let cfg = PivotalConfig {
            steps: 10,
            anchors_per_step: 2,
            ..PivotalConfig::default()
        };
        let out = pivotal_tune(&gen, &pivots, &obs, &cfg, 1).unwrap();
        assert!(out.weights[0].distance(gen.params()) < 1e-6);
    }

    #[test]
    fn anchor_only_objective_keeps_weights() {
        let (gen, _, obs) = setup();
        let pivots = vec![(LatentVector(vec![1.0, 1.0, -1.0, 0.0]), None)];
        let cfg = PivotalConfig {
            steps: 10,
            anchors_per_step: 2,
            fit_data: false,
            ..PivotalConfig::default()
        };
        let out = pivotal_tune(&gen, &pivots, &obs, &cfg, 1).unwrap();
        assert!(out.weights[0].distance(gen.params()) < 1e-6);
    }
}
