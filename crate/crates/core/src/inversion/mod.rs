//! Inversion of observations for generator inputs (and, for pivotal
//! tuning, generator weights).
//!
//! Every method shares [`DataLoss`]: a weighted sum of a well-mismatch term,
//! an optional seismic-mismatch term and a latent prior penalty.

mod adam;
mod dream;
mod flow;
mod inference_net;
mod latent;
mod pivotal;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use dream::{
    accept_probability, dream_zs, gelman_rubin, gelman_rubin_samples, metropolis_accept, parallel_direction_jump,
    ChainEnsemble, DreamConfig,
};
pub use flow::{variational_infer, FlowConfig, FlowModel, Likelihood, VariationalOutcome};
pub use inference_net::{
    mean_pairwise_distance, prior_pairwise_distance, train_inference_network, InferenceNet, InferenceNetConfig,
    InferenceOutcome, NetInit,
};
pub use latent::{latent_optimize, latent_optimize_from, LatentOptConfig};
pub use pivotal::{pivotal_tune, PivotalConfig, PivotalOutcome, TuningMode};

use crate::error::{Error, Result};
use crate::generator::{Generator, GridVars, LabelVector, LatentVector};
use crate::geophysics::{SeismicCube, SeismicModel};
use crate::metrics::mae;
use crate::survey::WellDataset;
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Seismic observation together with the operator that produced it.
#[derive(Clone, Debug)]
pub struct SeismicObservation {
    pub model: SeismicModel,
    pub cube: SeismicCube,
}

/// Everything an inversion is conditioned on.
#[derive(Clone, Debug)]
pub struct Observations {
    pub wells: WellDataset,
    pub seismic: Option<SeismicObservation>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Squared,
    Absolute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermWeights {
    /// Each active term is scaled by the inverse of its value at the
    /// starting point, so both contribute equally; a single active term
    /// keeps unit weight.
    #[default]
    Equal,
    Fixed { well: f64, seismic: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataLossConfig {
    pub wells: bool,
    pub seismic: bool,
    pub weights: TermWeights,
    pub well_metric: Metric,
    pub seismic_metric: Metric,
    /// Coefficient of the `‖z‖²/d` prior penalty.
    pub lambda_z: f64,
}

impl Default for DataLossConfig {
    fn default() -> Self {
        DataLossConfig {
            wells: true,
            seismic: false,
            weights: TermWeights::Equal,
            well_metric: Metric::Squared,
            seismic_metric: Metric::Squared,
            lambda_z: 0.0,
        }
    }
}

/// Tape handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub well: Option<Var>,
    pub seismic: Option<Var>,
}

/// Data-mismatch loss prepared for one set of observations.
#[derive(Clone, Debug)]
pub struct DataLoss {
    config: DataLossConfig,
    well_index: Arc<Vec<usize>>,
    well_target: Tensor,
    seismic: Option<SeismicObservation>,
    w_well: f64,
    w_seismic: f64,
}

impl DataLoss {
    pub fn new(obs: &Observations, config: &DataLossConfig) -> Result<Self> {
        if !config.wells && !config.seismic {
            return Err(Error::invalid("data loss needs at least one active term"));
        }
        if config.lambda_z < 0.0 {
            return Err(Error::invalid("lambda_z must be >= 0"));
        }
        if config.wells && obs.wells.n_obs() == 0 {
            return Err(Error::invalid("well term active but no well data"));
        }
        if config.seismic && obs.seismic.is_none() {
            return Err(Error::invalid("seismic term active but no seismic cube"));
        }
        let (w_well, w_seismic) = match config.weights {
            TermWeights::Equal => (1.0, 1.0),
            TermWeights::Fixed { well, seismic } => {
                if !(well >= 0.0 && seismic >= 0.0) {
                    return Err(Error::invalid("loss term weights must be >= 0"));
                }
                (well, seismic)
            }
        };
        Ok(DataLoss {
            config: *config,
            well_index: obs.wells.flat_indices(),
            well_target: Tensor::from_vec(obs.wells.values()),
            seismic: if config.seismic { obs.seismic.clone() } else { None },
            w_well,
            w_seismic,
        })
    }

    pub fn config(&self) -> &DataLossConfig {
        &self.config
    }

    /// `(w_well, w_seismic)` currently applied.
    pub fn weights(&self) -> (f64, f64) {
        (self.w_well, self.w_seismic)
    }

    fn both_equal(&self) -> bool {
        self.config.wells && self.config.seismic && self.config.weights == TermWeights::Equal
    }

    /// Freezes equal-contribution weights from unweighted term values at the
    /// starting point. No-op unless both terms are active with equal weighting.
    pub fn calibrate(&mut self, well0: f64, seismic0: f64) {
        if self.both_equal() {
            let inv = |v: f64| if v > 1e-12 && v.is_finite() { 1.0 / v } else { 1.0 };
            self.w_well = inv(well0);
            self.w_seismic = inv(seismic0);
        }
    }

    /// Calibrates at one starting input (see [`DataLoss::calibrate`]).
    pub fn calibrated_at<G: Generator>(&self, gen: &G, z: &LatentVector, labels: Option<&LabelVector>) -> Result<Self> {
        let mut out = self.clone();
        if self.both_equal() {
            let (w, s) = self.raw_terms(gen, z, labels)?;
            out.calibrate(w, s);
        }
        Ok(out)
    }

    /// Unweighted `(well, seismic)` terms at one input (0 when inactive).
    pub fn raw_terms<G: Generator>(&self, gen: &G, z: &LatentVector, labels: Option<&LabelVector>) -> Result<(f64, f64)> {
        gen.check_inputs(z, labels)?;
        let mut tape = Tape::new(Precision::F64);
        let zv = tape.constant(z.to_tensor());
        let lv = labels.map(|l| tape.constant(Tensor::from_vec(l.values.clone())));
        let pv = gen.param_vars(&mut tape, false);
        let out = gen.forward(&mut tape, zv, lv, &pv)?;
        let l = self.record(&mut tape, out, None)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
        Ok((get(l.well), get(l.seismic)))
    }

    fn metric(tape: &mut Tape, diff: Var, m: Metric) -> Var {
        let e = match m {
            Metric::Squared => tape.square(diff),
            Metric::Absolute => tape.abs(diff),
        };
        tape.mean(e)
    }

    /// Records the loss for a generated grid; `z` adds the prior penalty.
    pub fn record(&self, tape: &mut Tape, grid: GridVars, z: Option<Var>) -> Result<LossVars> {
        let mut total: Option<Var> = None;
        let mut acc = |tape: &mut Tape, v: Var| -> Result<()> {
            total = Some(match total {
                None => v,
                Some(t) => tape.add(t, v)?,
            });
            Ok(())
        };
        let mut well = None;
        if self.config.wells {
            let n = tape.value(grid.coarse).numel();
            let flat = tape.reshape(grid.coarse, &[n])?;
            let pred = tape.gather(flat, self.well_index.clone())?;
            let target = tape.constant(self.well_target.clone());
            let diff = tape.sub(pred, target)?;
            let term = Self::metric(tape, diff, self.config.well_metric);
            well = Some(term);
            let weighted = tape.scale(term, self.w_well);
            acc(tape, weighted)?;
        }
        let mut seismic = None;
        if let Some(obs) = &self.seismic {
            let pred = obs.model.record(tape, grid.coarse)?;
            let target = tape.constant(obs.cube.amplitudes.clone());
            let diff = tape.sub(pred, target)?;
            let term = Self::metric(tape, diff, self.config.seismic_metric);
            seismic = Some(term);
            let weighted = tape.scale(term, self.w_seismic);
            acc(tape, weighted)?;
        }
        if let Some(z) = z.filter(|_| self.config.lambda_z > 0.0) {
            let d = tape.value(z).numel() as f64;
            let sq = tape.square(z);
            let s = tape.sum(sq);
            let prior = tape.scale(s, self.config.lambda_z / d);
            acc(tape, prior)?;
        }
        Ok(LossVars {
            total: total.expect("at least one term is active"),
            well,
            seismic,
        })
    }
}

/// Outcome of one loss-and-gradient evaluation at a latent point.
pub(crate) struct Evaluation {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    pub grad_labels: Option<Vec<f64>>,
}

/// Loss and gradients with respect to `z` (and labels when requested),
/// generator parameters held constant.
pub(crate) fn evaluate<G: Generator>(
    gen: &G,
    loss: &DataLoss,
    z: &[f64],
    labels: Option<&[f64]>,
    grad_labels: bool,
    precision: Precision,
) -> Result<Evaluation> {
    let mut tape = Tape::new(precision);
    let zv = tape.input(Tensor::from_vec(z.to_vec()));
    let lv = labels.map(|l| {
        let t = Tensor::from_vec(l.to_vec());
        if grad_labels {
            tape.input(t)
        } else {
            tape.constant(t)
        }
    });
    let pv = gen.param_vars(&mut tape, false);
    let out = gen.forward(&mut tape, zv, lv, &pv)?;
    let l = loss.record(&mut tape, out, Some(zv))?;
    let value = tape.value(l.total).item();
    if !value.is_finite() {
        return Ok(Evaluation {
            loss: value,
            grad_z: vec![],
            grad_labels: None,
        });
    }
    let g = tape.backward(l.total, &Tensor::scalar(1.0))?;
    Ok(Evaluation {
        loss: value,
        grad_z: g.wrt(zv).into_data(),
        grad_labels: lv.filter(|_| grad_labels).map(|v| g.wrt(v).into_data()),
    })
}

/// Well MAE (inversion error) of the sample generated from `(z, labels)`.
pub fn well_mae<G: Generator>(
    gen: &G,
    wells: &WellDataset,
    z: &LatentVector,
    labels: Option<&LabelVector>,
) -> Result<f64> {
    let grid = gen.generate(z, labels)?;
    let idx = wells.flat_indices();
    let pred: Vec<f64> = idx.iter().map(|&i| grid.coarse_fraction.data()[i]).collect();
    mae(&wells.values(), &pred)
}

/// Per-sample status of an inversion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SampleStatus {
    Converged,
    /// Loss became non-finite at this iteration; the sample was aborted.
    NonFinite { iteration: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub latent: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
    /// Loss at every iteration, without gaps.
    #[serde(with = "nan_as_null::vec")]
    pub history: Vec<f64>,
    /// Well MAE of the final sample (`null` in JSON when undefined).
    #[serde(with = "nan_as_null")]
    pub inversion_error: f64,
    #[serde(flatten)]
    pub status: SampleStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub method: String,
    pub seed: u64,
    pub samples: Vec<SampleResult>,
    /// Fingerprint of the generator weights used for the final samples.
    pub weights_fingerprint: String,
    /// Wall-clock seconds; not serialized so artifacts stay reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl InversionResult {
    pub fn latents(&self) -> Vec<LatentVector> {
        self.samples.iter().map(|s| LatentVector(s.latent.clone())).collect()
    }

    pub fn labels(&self) -> Result<Vec<Option<LabelVector>>> {
        self.samples
            .iter()
            .map(|s| s.labels.clone().map(LabelVector::from_values).transpose())
            .collect()
    }

    pub fn inversion_errors(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.inversion_error).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let o: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
            o.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let o = Vec::<Option<f64>>::deserialize(d)?;
            Ok(o.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

pub(crate) fn fingerprint_hex(v: u64) -> String {
    format!("{v:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GridGeometry, LinearGenerator, ModelGrid, ProceduralGenerator};
    use crate::geophysics::{BurdenConfig, PsfConfig, RockPhysicsParams};
    use crate::survey::extract_well_data;
    use crate::tensor::gradient_check;

    fn tiny() -> GridGeometry {
        GridGeometry {
            nx: 8,
            ny: 8,
            nz: 4,
            dx: 50.0,
            dy: 50.0,
            dz: 0.5,
        }
    }

    #[test]
    fn no_active_term_rejected() {
        let grid = ModelGrid::constant(tiny(), 0.5, 0.5);
        let obs = Observations {
            wells: extract_well_data(&grid, &[(1, 1)]).unwrap(),
            seismic: None,
        };
        let cfg = DataLossConfig {
            wells: false,
            ..DataLossConfig::default()
        };
        assert!(DataLoss::new(&obs, &cfg).is_err());
    }

    #[test]
    fn single_cell_arithmetic() {
        let g = GridGeometry { nz: 1, ..tiny() };
        let obs = Observations {
            wells: extract_well_data(&ModelGrid::constant(g, 0.3, 0.0), &[(2, 3)]).unwrap(),
            seismic: None,
        };
        let loss = DataLoss::new(&obs, &DataLossConfig::default()).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let c = tape.constant(Tensor::full(vec![1, 8, 8], 0.4));
        let l = loss.record(&mut tape, GridVars { coarse: c, depo: c }, None).unwrap();
        assert!((tape.value(l.total).item() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn truth_gives_zero_data_terms() {
        let gen = ProceduralGenerator::new(tiny(), 8).unwrap();
        let z = LatentVector(vec![0.3; 8]);
        let truth = gen.generate_with(&z, None, Precision::F64).unwrap();
        let psf = PsfConfig::default();
        let model = SeismicModel::for_grid(&truth, RockPhysicsParams::default(), BurdenConfig::default(), psf).unwrap();
        let cube = model.forward(&truth).unwrap();
        let obs = Observations {
            wells: extract_well_data(&truth, &[(1, 1), (6, 5)]).unwrap(),
            seismic: Some(SeismicObservation { model, cube }),
        };
        let cfg = DataLossConfig {
            seismic: true,
            lambda_z: 0.5,
            ..DataLossConfig::default()
        };
        let loss = DataLoss::new(&obs, &cfg).unwrap();
        let (w, s) = loss.raw_terms(&gen, &z, None).unwrap();
        assert!(w < 1e-20 && s < 1e-20, "{w} {s}");
        let e = evaluate(&gen, &loss, &z.0, None, false, Precision::F64).unwrap();
        assert!((e.loss - 0.5 * 0.09).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_normalize_initial_terms() {
        let gen = ProceduralGenerator::new(tiny(), 8).unwrap();
        let truth = gen.generate_with(&LatentVector(vec![0.8; 8]), None, Precision::F64).unwrap();
        let model =
            SeismicModel::for_grid(&truth, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default())
                .unwrap();
        let cube = model.forward(&truth).unwrap();
        let obs = Observations {
            wells: extract_well_data(&truth, &[(1, 1), (6, 5)]).unwrap(),
            seismic: Some(SeismicObservation { model, cube }),
        };
        let cfg = DataLossConfig {
            seismic: true,
            ..DataLossConfig::default()
        };
        let z0 = LatentVector(vec![-0.5; 8]);
        let loss = DataLoss::new(&obs, &cfg).unwrap().calibrated_at(&gen, &z0, None).unwrap();
        let e = evaluate(&gen, &loss, &z0.0, None, false, Precision::F64).unwrap();
        assert!((e.loss - 2.0).abs() < 1e-9, "{}", e.loss);
    }

    #[test]
    fn well_loss_gradient_matches_finite_differences() {
        let gen = LinearGenerator::random(tiny(), 8, 0.3, 2).unwrap();
        let truth = ModelGrid::constant(tiny(), 0.4, 0.4);
        let obs = Observations {
            wells: extract_well_data(&truth, &[(0, 0), (3, 7)]).unwrap(),
            seismic: None,
        };
        let loss = DataLoss::new(
            &obs,
            &DataLossConfig {
                lambda_z: 0.1,
                ..DataLossConfig::default()
            },
        )
        .unwrap();
        let p = Tensor::from_fn(vec![8], |i| (i as f64 * 0.9).sin());
        let r = gradient_check(
            |t, z| {
                let pv = gen.param_vars(t, false);
                let out = gen.forward(t, z, None, &pv)?;
                Ok(loss.record(t, out, Some(z))?.total)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
