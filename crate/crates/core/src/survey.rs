//! Well placement and well-log extraction.
//!
//! Wells are drawn one at a time from a weight map multiplied by a ramp mask
//! around every well already placed: zero inside the exclusion radius,
//! rising linearly to one at the ramp radius. Masks of several wells
//! multiply. A first stage places the legacy wells from a shared map; a
//! second stage places extra wells per test sample, with the legacy wells
//! contributing their own (smaller) radii.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GridGeometry, ModelGrid};
use crate::io::format_sig;
use crate::rng;

/// Radii of one kind of exclusion zone, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Radii {
    pub exclusion_m: f64,
    pub ramp_m: f64,
}

impl Radii {
    pub fn validate(&self) -> Result<()> {
        if !(self.exclusion_m > 0.0 && self.exclusion_m < self.ramp_m) {
            return Err(Error::invalid(format!(
                "need 0 < exclusion ({}) < ramp outer radius ({})",
                self.exclusion_m, self.ramp_m
            )));
        }
        Ok(())
    }

    /// Mask value at horizontal distance `d` (meters).
    pub fn mask(&self, d: f64) -> f64 {
        if d < self.exclusion_m {
            0.0
        } else if d < self.ramp_m {
            (d - self.exclusion_m) / (self.ramp_m - self.exclusion_m)
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementPolicy {
    pub legacy_wells: usize,
    pub legacy: Radii,
    pub extra_wells: usize,
    pub extra: Radii,
    /// Zone around legacy wells during the second stage.
    pub legacy_in_stage2: Radii,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            legacy_wells: 4,
            legacy: Radii {
                exclusion_m: 1000.0,
                ramp_m: 2000.0,
            },
            extra_wells: 16,
            extra: Radii {
                exclusion_m: 500.0,
                ramp_m: 1000.0,
            },
            legacy_in_stage2: Radii {
                exclusion_m: 250.0,
                ramp_m: 500.0,
            },
        }
    }
}

impl PlacementPolicy {
    pub fn validate(&self) -> Result<()> {
        self.legacy.validate()?;
        self.extra.validate()?;
        self.legacy_in_stage2.validate()
    }
}

/// Horizontal cell location `(ix, iy)`.
pub type Location = (usize, usize);

/// Legacy wells shared by every test sample plus extra wells per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellLayout {
    pub legacy: Vec<Location>,
    pub extra: Vec<Vec<Location>>,
}

impl WellLayout {
    /// The first `n` wells of test sample `case`: legacy wells first, then
    /// extra wells in draw order.
    pub fn locations(&self, case: usize, n: usize) -> Result<Vec<Location>> {
        let extra = self
            .extra
            .get(case)
            .ok_or_else(|| Error::invalid(format!("no well layout for test case {case}")))?;
        let all: Vec<Location> = self.legacy.iter().chain(extra).copied().collect();
        if n > all.len() {
            return Err(Error::invalid(format!("requested {n} wells, layout has {}", all.len())));
        }
        Ok(all[..n].to_vec())
    }
}

/// Product of ramp masks, updated incrementally around each new well.
struct MaskField {
    geometry: GridGeometry,
    mask: Vec<f64>,
}

impl MaskField {
    fn new(geometry: GridGeometry) -> Self {
        MaskField {
            geometry,
            mask: vec![1.0; geometry.nx * geometry.ny],
        }
    }

    fn apply(&mut self, at: Location, radii: Radii) {
        let g = self.geometry;
        let rx = (radii.ramp_m / g.dx).ceil() as isize;
        let ry = (radii.ramp_m / g.dy).ceil() as isize;
        let (cx, cy) = (at.0 as isize, at.1 as isize);
        for iy in (cy - ry).max(0)..=(cy + ry).min(g.ny as isize - 1) {
            for ix in (cx - rx).max(0)..=(cx + rx).min(g.nx as isize - 1) {
                let d = distance_m(&g, at, (ix as usize, iy as usize));
                self.mask[iy as usize * g.nx + ix as usize] *= radii.mask(d);
            }
        }
    }

    fn draw(&self, weights: &[f64], rng: &mut rng::Rng, stage: &'static str, well: usize) -> Result<Location> {
        let total: f64 = weights.iter().zip(&self.mask).map(|(w, m)| w * m).sum();
        if !(total > 0.0) {
            return Err(Error::Infeasible { stage, well });
        }
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut last = None;
        for (i, (w, m)) in weights.iter().zip(&self.mask).enumerate() {
            let p = w * m;
            if p > 0.0 {
                acc += p;
                last = Some(i);
                if acc > u {
                    break;
                }
            }
        }
        let i = last.expect("positive total has a positive cell");
        Ok((i % self.geometry.nx, i / self.geometry.nx))
    }
}

/// Center-to-center horizontal distance in meters.
pub fn distance_m(g: &GridGeometry, a: Location, b: Location) -> f64 {
    let dx = (a.0 as f64 - b.0 as f64) * g.dx;
    let dy = (a.1 as f64 - b.1 as f64) * g.dy;
    (dx * dx + dy * dy).sqrt()
}

fn check_map(g: &GridGeometry, w: &[f64]) -> Result<()> {
    if w.len() != g.nx * g.ny {
        return Err(Error::Shape {
            op: "weight map",
            lhs: vec![g.ny, g.nx],
            rhs: vec![w.len()],
        });
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("weight map must be finite and non-negative"));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("weight map is zero everywhere"));
    }
    Ok(())
}

/// Stage 1: `policy.legacy_wells` wells from one weight map `[ny, nx]`.
pub fn place_legacy(g: &GridGeometry, weights: &[f64], policy: &PlacementPolicy, seed: u64) -> Result<Vec<Location>> {
    policy.validate()?;
    check_map(g, weights)?;
    let mut rng = rng::stream(rng::derive(seed, "wells/legacy", 0), 0);
    let mut field = MaskField::new(*g);
    let mut out = Vec::with_capacity(policy.legacy_wells);
    for k in 0..policy.legacy_wells {
        let loc = field.draw(weights, &mut rng, "legacy wells", k)?;
        field.apply(loc, policy.legacy);
        out.push(loc);
    }
    Ok(out)
}

/// Stage 2: `policy.extra_wells` wells for one test sample.
pub fn place_extra(
    g: &GridGeometry,
    weights: &[f64],
    legacy: &[Location],
    policy: &PlacementPolicy,
    seed: u64,
    case: usize,
) -> Result<Vec<Location>> {
    policy.validate()?;
    check_map(g, weights)?;
    let mut rng = rng::stream(rng::derive(seed, "wells/extra", case as u64), 0);
    let mut field = MaskField::new(*g);
    for &l in legacy {
        field.apply(l, policy.legacy_in_stage2);
    }
    let mut out = Vec::with_capacity(policy.extra_wells);
    for k in 0..policy.extra_wells {
        let loc = field.draw(weights, &mut rng, "extra wells", legacy.len() + k)?;
        field.apply(loc, policy.extra);
        out.push(loc);
    }
    Ok(out)
}

/// Both stages. The legacy map is the mean of the per-sample maps; the
/// extra wells of sample `i` are weighted by map `i`.
pub fn place_wells(g: &GridGeometry, maps: &[Vec<f64>], policy: &PlacementPolicy, seed: u64) -> Result<WellLayout> {
    if maps.is_empty() {
        return Err(Error::invalid("place_wells needs at least one weight map"));
    }
    for m in maps {
        check_map(g, m)?;
    }
    let n = g.nx * g.ny;
    let mean: Vec<f64> = (0..n).map(|i| maps.iter().map(|m| m[i]).sum::<f64>() / maps.len() as f64).collect();
    let legacy = place_legacy(g, &mean, policy, seed)?;
    let extra = maps
        .iter()
        .enumerate()
        .map(|(i, m)| place_extra(g, m, &legacy, policy, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(WellLayout { legacy, extra })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Well {
    pub id: usize,
    pub ix: usize,
    pub iy: usize,
    /// Coarse fraction per layer, top to bottom.
    pub values: Vec<f64>,
}

/// Coarse-fraction logs along vertical wells.
#[derive(Clone, Debug, PartialEq)]
pub struct WellDataset {
    pub geometry: GridGeometry,
    pub wells: Vec<Well>,
}

/// Copies the coarse-fraction column at each location.
pub fn extract_well_data(grid: &ModelGrid, locations: &[Location]) -> Result<WellDataset> {
    let g = grid.geometry;
    let mut wells = Vec::with_capacity(locations.len());
    for (id, &(ix, iy)) in locations.iter().enumerate() {
        if ix >= g.nx || iy >= g.ny {
            return Err(Error::invalid(format!(
                "well {id} at ({ix}, {iy}) outside {}x{} grid",
                g.nx, g.ny
            )));
        }
        let values = (0..g.nz).map(|iz| grid.coarse_at(ix, iy, iz)).collect();
        wells.push(Well { id, ix, iy, values });
    }
    Ok(WellDataset { geometry: g, wells })
}

impl WellDataset {
    pub fn len(&self) -> usize {
        self.wells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wells.is_empty()
    }

    /// Number of scalar observations.
    pub fn n_obs(&self) -> usize {
        self.wells.iter().map(|w| w.values.len()).sum()
    }

    /// Flat indices into a `[nz, ny, nx]` channel, ordered well by well, top down.
    pub fn flat_indices(&self) -> Arc<Vec<usize>> {
        let g = self.geometry;
        Arc::new(
            self.wells
                .iter()
                .flat_map(|w| (0..w.values.len()).map(move |iz| g.index(w.ix, w.iy, iz)))
                .collect(),
        )
    }

    /// Observed values in the order of [`WellDataset::flat_indices`].
    pub fn values(&self) -> Vec<f64> {
        self.wells.iter().flat_map(|w| w.values.iter().copied()).collect()
    }

    /// Copy with i.i.d. Gaussian noise added and values clamped to `[0, 1]`.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Self {
        let mut out = self.clone();
        for w in &mut out.wells {
            let mut r = rng::stream(rng::derive(seed, "wells/noise", w.id as u64), 0);
            for v in &mut w.values {
                *v = (*v + sigma * rng::normal(&mut r)).clamp(0.0, 1.0);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("well_id,ix,iy,iz,coarse_fraction\n");
        for w in &self.wells {
            for (iz, v) in w.values.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", w.id, w.ix, w.iy, iz, format_sig(*v, 9));
            }
        }
        s
    }

    pub fn from_csv(geometry: GridGeometry, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("well_id,ix,iy,iz,coarse_fraction") {
            return Err(Error::Format("wells CSV: unexpected header".into()));
        }
        let mut wells: Vec<Well> = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("wells CSV line {}: malformed row", n + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let id: usize = f[0].parse().map_err(|_| bad())?;
            let ix: usize = f[1].parse().map_err(|_| bad())?;
            let iy: usize = f[2].parse().map_err(|_| bad())?;
            let iz: usize = f[3].parse().map_err(|_| bad())?;
            let v: f64 = f[4].parse().map_err(|_| bad())?;
            match wells.last_mut() {
                Some(w) if w.id == id => {
                    if iz != w.values.len() || (ix, iy) != (w.ix, w.iy) {
                        return Err(bad());
                    }
                    w.values.push(v);
                }
                _ => {
                    if iz != 0 {
                        return Err(bad());
                    }
                    wells.push(Well {
                        id,
                        ix,
                        iy,
                        values: vec![v],
                    });
                }
            }
        }
        Ok(WellDataset { geometry, wells })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        std::fs::write(p, self.to_csv()).map_err(|e| Error::io(p, e))
    }

    pub fn load_csv(geometry: GridGeometry, path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_csv(geometry, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn uniform(g: &GridGeometry) -> Vec<f64> {
        vec![1.0; g.nx * g.ny]
    }

    #[test]
    fn legacy_wells_respect_one_km() {
        let g = GridGeometry::paper();
        let wells = place_legacy(&g, &uniform(&g), &PlacementPolicy::default(), 0).unwrap();
        assert_eq!(wells.len(), 4);
        for (i, a) in wells.iter().enumerate() {
            for b in &wells[i + 1..] {
                let d = distance_m(&g, *a, *b) / g.dx;
                assert!(d >= 20.0, "{a:?} {b:?} {d}");
            }
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let g = GridGeometry::desk();
        let maps = vec![uniform(&g), uniform(&g)];
        let a = place_wells(&g, &maps, &PlacementPolicy::default(), 5).unwrap();
        let b = place_wells(&g, &maps, &PlacementPolicy::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.locations(1, 20).unwrap().len(), 20);
        assert_eq!(a.locations(0, 8).unwrap()[..4], a.legacy[..]);
    }

    #[test]
    fn infeasible_second_well() {
        let g = GridGeometry::desk();
        let mut w = vec![0.0; g.nx * g.ny];
        w[17] = 1.0;
        let policy = PlacementPolicy {
            legacy: Radii {
                exclusion_m: 1e6,
                ramp_m: 2e6,
            },
            ..PlacementPolicy::default()
        };
        match place_legacy(&g, &w, &policy, 0) {
            Err(Error::Infeasible { well, .. }) => assert_eq!(well, 1),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn invalid_radii_rejected() {
        let policy = PlacementPolicy {
            extra: Radii {
                exclusion_m: 500.0,
                ramp_m: 400.0,
            },
            ..PlacementPolicy::default()
        };
        assert!(policy.validate().is_err());
    }

    #[test]
    fn extraction_copies_columns() {
        let g = GridGeometry::paper();
        let grid = ModelGrid::new(
            g,
            Tensor::from_fn(g.shape().to_vec(), |i| (i % 97) as f64 / 96.0),
            Tensor::zeros(g.shape().to_vec()),
        )
        .unwrap();
        let locs: Vec<Location> = (0..20).map(|i| (i * 5, 127 - i * 3)).collect();
        let ds = extract_well_data(&grid, &locs).unwrap();
        assert_eq!(ds.n_obs(), 320);
        for w in &ds.wells {
            for iz in 0..g.nz {
                assert_eq!(w.values[iz], grid.coarse_at(w.ix, w.iy, iz));
            }
        }
        let idx = ds.flat_indices();
        let vals = ds.values();
        for (i, v) in idx.iter().zip(vals) {
            assert_eq!(grid.coarse_fraction.data()[*i], v);
        }
    }

    #[test]
    fn constant_grid_constant_wells() {
        let g = GridGeometry::desk();
        let ds = extract_well_data(&ModelGrid::constant(g, 0.3, 0.5), &[(1, 2), (30, 31)]).unwrap();
        assert!(ds.values().iter().all(|&v| v == 0.3));
        assert!(extract_well_data(&ModelGrid::constant(g, 0.3, 0.5), &[(32, 0)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = GridGeometry::desk();
        let grid = ModelGrid::new(
            g,
            Tensor::from_fn(g.shape().to_vec(), |i| ((i * 31) % 101) as f64 / 101.0),
            Tensor::zeros(g.shape().to_vec()),
        )
        .unwrap();
        let ds = extract_well_data(&grid, &[(3, 4), (20, 9)]).unwrap();
        let csv = ds.to_csv();
        assert!(csv.starts_with("well_id,ix,iy,iz,coarse_fraction\n"));
        let back = WellDataset::from_csv(g, &csv).unwrap();
        for (a, b) in ds.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 5e-9 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn noise_is_optional_and_bounded() {
        let g = GridGeometry::desk();
        let ds = extract_well_data(&ModelGrid::constant(g, 0.99, 0.5), &[(1, 2)]).unwrap();
        let noisy = ds.with_noise(0.1, 3);
        assert_ne!(noisy.values(), ds.values());
        assert!(noisy.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
