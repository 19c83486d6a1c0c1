//! Validation metrics: mean absolute errors against wells and ground truth,
//! ensemble statistics, multi-scale sliced Wasserstein distance, classical
//! MDS, PCA directions and error-landscape slices.

mod landscape;
mod linalg;
mod mds;
mod swd;

use serde::{Deserialize, Serialize};

pub use landscape::{error_landscape, LandscapeConfig, LandscapeGrid};
pub use linalg::symmetric_eigen;
pub use mds::{classical_mds, pca_directions, stress, DistanceMatrix};
pub use swd::{laplacian_pyramid, pyramid_collapse, sliced_wasserstein, swd_multiscale, wasserstein1, Property, SwdConfig, SwdResult};

use crate::error::{Error, Result};
use crate::generator::ModelGrid;
use crate::io::format_sig;
use crate::survey::WellDataset;
use crate::tensor::Tensor;

/// Thresholds of a tolerable (1 %) and a useful (10 %) error.
pub const STRICT_THRESHOLD: f64 = 0.01;
pub const USEFUL_THRESHOLD: f64 = 0.10;

/// Mean absolute error `(1/n)·Σ|y_i − ŷ_i|`.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::invalid(format!("mae: lengths differ ({} vs {})", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::invalid("mae of zero values"));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Minimum, quartiles and maximum (linear interpolation between order
/// statistics). NaN values are ignored; all-NaN input gives NaNs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut s: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        if s.is_empty() {
            return Summary {
                min: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                max: f64::NAN,
            };
        }
        s.sort_by(f64::total_cmp);
        Summary {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        }
    }
}

pub(crate) fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let x = p * (s.len() - 1) as f64;
    let (i, f) = (x.floor() as usize, x.fract());
    if i + 1 < s.len() {
        s[i] + f * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

/// Errors of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    /// Well MAE, coarse fraction only.
    pub inversion: f64,
    /// Full-grid MAE of the coarse fraction.
    pub generalization_coarse: f64,
    /// Full-grid MAE of the deposition time.
    pub generalization_time: f64,
}

impl SampleErrors {
    pub fn inversion_within(&self, threshold: f64) -> bool {
        self.inversion <= threshold
    }

    pub fn generalization_within(&self, threshold: f64) -> bool {
        self.generalization_coarse <= threshold && self.generalization_time <= threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub samples: Vec<SampleErrors>,
    pub inversion: Summary,
    pub generalization_coarse: Summary,
    pub generalization_time: Summary,
}

impl ErrorReport {
    /// Fractions of samples whose inversion error is within 1 % and 10 %.
    pub fn inversion_pass_rates(&self) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let count = |t| self.samples.iter().filter(|s| s.inversion_within(t)).count() as f64 / n;
        (count(STRICT_THRESHOLD), count(USEFUL_THRESHOLD))
    }
}

fn check_geometry(a: &ModelGrid, b: &ModelGrid) -> Result<()> {
    if a.geometry != b.geometry {
        return Err(Error::invalid("sample geometry does not match the ground truth"));
    }
    Ok(())
}

/// Inversion and generalization errors of every sample against the wells
/// and the full ground truth.
pub fn error_report(samples: &[ModelGrid], wells: &WellDataset, truth: &ModelGrid) -> Result<ErrorReport> {
    if samples.is_empty() {
        return Err(Error::invalid("error report needs at least one sample"));
    }
    if wells.geometry != truth.geometry {
        return Err(Error::invalid("well data geometry does not match the ground truth"));
    }
    let idx = wells.flat_indices();
    let obs = wells.values();
    let rows = samples
        .iter()
        .map(|s| {
            check_geometry(s, truth)?;
            let pred: Vec<f64> = idx.iter().map(|&i| s.coarse_fraction.data()[i]).collect();
            Ok(SampleErrors {
                inversion: mae(&obs, &pred)?,
                generalization_coarse: mae(truth.coarse_fraction.data(), s.coarse_fraction.data())?,
                generalization_time: mae(truth.depo_time.data(), s.depo_time.data())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SampleErrors) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(ErrorReport {
        inversion: Summary::of(&col(|s| s.inversion)),
        generalization_coarse: Summary::of(&col(|s| s.generalization_coarse)),
        generalization_time: Summary::of(&col(|s| s.generalization_time)),
        samples: rows,
    })
}

/// Per-cell mean and population standard deviation of each property.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub coarse_mean: Tensor,
    pub coarse_std: Tensor,
    pub time_mean: Tensor,
    pub time_std: Tensor,
}

pub fn ensemble_stats(samples: &[ModelGrid]) -> Result<EnsembleStats> {
    if samples.len() < 2 {
        return Err(Error::invalid("ensemble statistics need at least 2 samples"));
    }
    for s in &samples[1..] {
        check_geometry(s, &samples[0])?;
    }
    let stats = |get: fn(&ModelGrid) -> &Tensor| {
        let shape = get(&samples[0]).shape().to_vec();
        let n = samples.len() as f64;
        let cells = get(&samples[0]).numel();
        let mut mean = vec![0.0; cells];
        for s in samples {
            mean.iter_mut().zip(get(s).data()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cells];
        for s in samples {
            var.iter_mut()
                .zip(get(s).data())
                .zip(&mean)
                .for_each(|((acc, v), m)| *acc += (v - m) * (v - m));
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        (Tensor::from_parts(shape.clone(), mean), Tensor::from_parts(shape, std))
    };
    let (coarse_mean, coarse_std) = stats(|g| &g.coarse_fraction);
    let (time_mean, time_std) = stats(|g| &g.depo_time);
    Ok(EnsembleStats {
        coarse_mean,
        coarse_std,
        time_mean,
        time_std,
    })
}

/// One row of the error CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub case: usize,
    pub wells: usize,
    pub seismic: bool,
    pub method: String,
    pub sample: usize,
    pub inv_err: f64,
    pub gen_err_frac: f64,
    pub gen_err_time: f64,
}

pub const ERROR_CSV_HEADER: &str = "case,wells,seismic,method,sample,inv_err,gen_err_frac,gen_err_time";

impl ErrorRow {
    pub fn from_report(case: usize, wells: usize, seismic: bool, method: &str, report: &ErrorReport) -> Vec<ErrorRow> {
        report
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| ErrorRow {
                case,
                wells,
                seismic,
                method: method.to_string(),
                sample: i,
                inv_err: s.inversion,
                gen_err_frac: s.generalization_coarse,
                gen_err_time: s.generalization_time,
            })
            .collect()
    }
}

pub fn error_csv(rows: &[ErrorRow]) -> String {
    let mut out = String::from(ERROR_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.case,
            r.wells,
            r.seismic,
            r.method,
            r.sample,
            format_sig(r.inv_err, 9),
            format_sig(r.gen_err_frac, 9),
            format_sig(r.gen_err_time, 9)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GridGeometry;
    use crate::survey::extract_well_data;

    fn geom() -> GridGeometry {
        GridGeometry {
            nx: 6,
            ny: 5,
            nz: 3,
            dx: 50.0,
            dy: 50.0,
            dz: 0.5,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((mae(&[0.2, 0.4], &[0.3, 0.1]).unwrap() - 0.2).abs() < 1e-15);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn truth() -> ModelGrid {
        let g = geom();
        ModelGrid::new(
            g,
            Tensor::from_fn(g.shape().to_vec(), |i| 0.1 + 0.8 * ((i * 7) % 11) as f64 / 11.0),
            Tensor::from_fn(g.shape().to_vec(), |i| 0.1 + 0.8 * ((i * 3) % 13) as f64 / 13.0),
        )
        .unwrap()
    }

    #[test]
    fn truth_replicated_gives_zero_errors() {
        let t = truth();
        let wells = extract_well_data(&t, &[(1, 1), (4, 3)]).unwrap();
        let r = error_report(&[t.clone(), t.clone()], &wells, &t).unwrap();
        assert!(r.samples.iter().all(|s| s.inversion == 0.0 && s.generalization_within(STRICT_THRESHOLD)));
        assert_eq!(r.inversion_pass_rates(), (1.0, 1.0));
    }

    #[test]
    fn shifted_sample_gives_shift_error() {
        let t = truth();
        let wells = extract_well_data(&t, &[(2, 2)]).unwrap();
        let s = ModelGrid::new(t.geometry, t.coarse_fraction.map(|v| v + 0.05), t.depo_time.map(|v| v + 0.05)).unwrap();
        let r = error_report(&[s], &wells, &t).unwrap();
        let e = r.samples[0];
        assert!((e.generalization_coarse - 0.05).abs() < 1e-12);
        assert!(!e.generalization_within(STRICT_THRESHOLD));
        assert!(e.generalization_within(USEFUL_THRESHOLD));
    }

    #[test]
    fn ensemble_examples() {
        let g = geom();
        let zero = ModelGrid::constant(g, 0.0, 0.0);
        let one = ModelGrid::constant(g, 1.0, 1.0);
        let s = ensemble_stats(&[zero.clone(), one]).unwrap();
        assert!(s.coarse_mean.data().iter().all(|&v| v == 0.5));
        assert!(s.coarse_std.data().iter().all(|&v| v == 0.5));
        let same = ensemble_stats(&[zero.clone(), zero.clone()]).unwrap();
        assert!(same.time_std.data().iter().all(|&v| v == 0.0));
        assert!(ensemble_stats(&[zero]).is_err());
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    }

    #[test]
    fn csv_schema() {
        let t = truth();
        let wells = extract_well_data(&t, &[(2, 2)]).unwrap();
        let r = error_report(&[t.clone()], &wells, &t).unwrap();
        let csv = error_csv(&ErrorRow::from_report(0, 4, true, "latent-opt", &r));
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), ERROR_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,4,true,latent-opt,0,0,0,0");
    }
}
