//! Error landscape on a two-dimensional slice of the latent space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, LabelVector, LatentVector};
use crate::inversion::well_mae;
use crate::io::format_sig;
use crate::survey::WellDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    /// Offsets along each direction span `[-range, range]`.
    pub range: f64,
    /// Nodes per axis.
    pub resolution: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            range: 20.0,
            resolution: 41,
        }
    }
}

impl LandscapeConfig {
    /// Node offsets; the middle node is exactly 0 for odd resolutions.
    pub fn offsets(&self) -> Vec<f64> {
        let n = self.resolution;
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| {
                let k = 2 * i as i64 - (n as i64 - 1);
                self.range * k as f64 / (n - 1) as f64
            })
            .collect()
    }
}

/// Well MAE at `center + a·d₁ + b·d₂` on a regular grid, row-major with `b`
/// fastest. Failed evaluations are stored as NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub center: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn latent_at(&self, i: usize, j: usize) -> LatentVector {
        node_latent(&self.center, &self.directions, self.a[i], self.b[j])
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.b.len() + j]
    }

    /// `(i, j)` of the smallest finite value.
    pub fn argmin(&self) -> Option<(usize, usize)> {
        let k = (0..self.values.len())
            .filter(|&k| self.values[k].is_finite())
            .min_by(|&x, &y| self.values[x].total_cmp(&self.values[y]))?;
        Some((k / self.b.len(), k % self.b.len()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,well_mae\n");
        for (i, a) in self.a.iter().enumerate() {
            for (j, b) in self.b.iter().enumerate() {
                let v = self.value(i, j);
                let v = if v.is_finite() { format_sig(v, 9) } else { String::new() };
                out.push_str(&format!("{},{},{}\n", format_sig(*a, 9), format_sig(*b, 9), v));
            }
        }
        out
    }
}

fn node_latent(center: &[f64], dirs: &[Vec<f64>; 2], a: f64, b: f64) -> LatentVector {
    LatentVector(
        center
            .iter()
            .zip(&dirs[0])
            .zip(&dirs[1])
            .map(|((c, u), v)| c + a * u + b * v)
            .collect(),
    )
}

pub fn error_landscape<G: Generator>(
    gen: &G,
    wells: &WellDataset,
    center: &LatentVector,
    labels: Option<&LabelVector>,
    directions: [Vec<f64>; 2],
    cfg: &LandscapeConfig,
) -> Result<LandscapeGrid> {
    if cfg.resolution == 0 || !(cfg.range >= 0.0) {
        return Err(Error::invalid("landscape needs resolution >= 1 and range >= 0"));
    }
    let d = center.dim();
    if directions.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("landscape directions must match the latent dimension"));
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let [u, v] = &directions;
    if (dot(u, u) - 1.0).abs() > 1e-8 || (dot(v, v) - 1.0).abs() > 1e-8 || dot(u, v).abs() > 1e-8 {
        return Err(Error::invalid("landscape directions must be orthonormal"));
    }
    let offsets = cfg.offsets();
    let n = offsets.len();
    let values = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let z = node_latent(&center.0, &directions, offsets[k / n], offsets[k % n]);
            match well_mae(gen, wells, &z, labels) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("landscape node {k}: {e}");
                    f64::NAN
                }
            }
        })
        .collect();
    Ok(LandscapeGrid {
        center: center.0.clone(),
        directions,
        a: offsets.clone(),
        b: offsets,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GridGeometry, ProceduralGenerator};
    use crate::survey::extract_well_data;

    #[test]
    fn offsets_cover_range_with_exact_zero() {
        let o = LandscapeConfig::default().offsets();
        assert_eq!(o.len(), 41);
        assert_eq!((o[0], o[20], o[40]), (-20.0, 0.0, 20.0));
        assert_eq!(o[21], 1.0);
    }

    #[test]
    fn nodes_equal_direct_evaluation() {
        let g = GridGeometry {
            nx: 8,
            ny: 8,
            nz: 4,
            dx: 200.0,
            dy: 200.0,
            dz: 1.0,
        };
        let gen = ProceduralGenerator::new(g, 8).unwrap();
        let truth = gen.generate(&LatentVector(vec![0.5, -0.2, 0.1, 0.9, 0.0, 0.3, -0.7, 1.2]), None).unwrap();
        let wells = extract_well_data(&truth, &[(1, 2), (6, 6)]).unwrap();
        let center = LatentVector(vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]);
        let dirs = [vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.8, 0.0, 0.0, 0.0, 0.0]];
        let cfg = LandscapeConfig {
            range: 2.0,
            resolution: 5,
        };
        let grid = error_landscape(&gen, &wells, &center, None, dirs, &cfg).unwrap();
        assert_eq!(grid.value(2, 2), well_mae(&gen, &wells, &center, None).unwrap());
        let direct = well_mae(&gen, &wells, &grid.latent_at(1, 4), None).unwrap();
        assert_eq!(grid.value(1, 4), direct);
        assert_eq!(grid.to_csv().lines().count(), 26);
    }
}
