//! Normal-incidence seismic forward model.
//!
//! Coarse fraction is mapped to impedance through the rock-physics chain,
//! padded with structureless over- and underburden, turned into interface
//! reflectivity `r = (I₂ − I₁)/(I₂ + I₁)` and blurred by a separable
//! point-spread function: a depth-domain Ricker wavelet vertically times a
//! unit-sum isotropic Gaussian laterally.
//!
//! The PSF depends on the average velocity, which is computed once from a
//! reference cube and then frozen, so the kernel does not depend on the
//! differentiated variables.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::rock_physics::{elastic, impedance_and_derivative, rock_physics, RockPhysicsParams};
use crate::error::{Error, Result};
use crate::generator::{GridGeometry, ModelGrid};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Relative weight below which outer lateral PSF taps are dropped.
const LATERAL_TRIM: f64 = 1e-10;

/// Ricker support in units of `1/(π k_p)`; the envelope there is `exp(−20)`.
const RICKER_SUPPORT: f64 = 4.5;

/// Structureless padding above and below the property grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurdenConfig {
    /// Overburden thickness in meters.
    pub above_m: f64,
    /// Underburden thickness in meters.
    pub below_m: f64,
    /// Constant coarse fraction of the overburden.
    pub fraction_above: f64,
    /// Constant coarse fraction of the underburden.
    pub fraction_below: f64,
}

impl Default for BurdenConfig {
    fn default() -> Self {
        BurdenConfig {
            above_m: 9.0,
            below_m: 9.0,
            fraction_above: 0.0,
            fraction_below: 0.0,
        }
    }
}

impl BurdenConfig {
    /// Burden cell counts `(above, below)` at vertical cell size `dz`.
    pub fn cells(&self, dz: f64) -> Result<(usize, usize)> {
        if !(self.above_m >= 0.0 && self.below_m >= 0.0 && dz > 0.0) {
            return Err(Error::invalid("burden thickness must be >= 0 and dz > 0"));
        }
        for f in [self.fraction_above, self.fraction_below] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("burden coarse fraction {f} outside [0, 1]")));
            }
        }
        Ok(((self.above_m / dz).round() as usize, (self.below_m / dz).round() as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfConfig {
    /// Ricker peak frequency in Hz.
    pub peak_frequency: f64,
    /// Stored for completeness; only normal incidence is modeled.
    pub incident_angle_deg: f64,
    /// Half-opening of the illumination cone, in `(0, 90]` degrees.
    pub illumination_angle_deg: f64,
    /// Velocity for time-to-depth conversion (m/s); computed from the
    /// reference cube when absent.
    pub v_avg: Option<f64>,
    /// Kernel extents `[kz, ky, kx]` (odd); derived from the wavelet
    /// support when absent.
    pub kernel_extents: Option<[usize; 3]>,
}

impl Default for PsfConfig {
    fn default() -> Self {
        PsfConfig {
            peak_frequency: 60.0,
            incident_angle_deg: 0.0,
            illumination_angle_deg: 45.0,
            v_avg: None,
            kernel_extents: None,
        }
    }
}

impl PsfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_frequency > 0.0) {
            return Err(Error::invalid("PSF peak frequency must be > 0"));
        }
        if !(self.illumination_angle_deg > 0.0 && self.illumination_angle_deg <= 90.0) {
            return Err(Error::invalid("illumination angle must lie in (0, 90] degrees"));
        }
        if let Some(v) = self.v_avg {
            if !(v > 0.0) {
                return Err(Error::invalid("v_avg must be > 0"));
            }
        }
        if let Some(k) = self.kernel_extents {
            if k.iter().any(|e| e % 2 == 0) {
                return Err(Error::invalid(format!("PSF kernel extents {k:?} must be odd")));
            }
        }
        Ok(())
    }

    /// Peak wavenumber (two-way) `k_p = 2 f / v` in 1/m.
    pub fn peak_wavenumber(&self, v_avg: f64) -> f64 {
        2.0 * self.peak_frequency / v_avg
    }

    /// Lateral Gaussian width `σ = v / (4 f tan θ)`; zero at θ = 90°.
    pub fn lateral_sigma(&self, v_avg: f64) -> f64 {
        let theta = self.illumination_angle_deg;
        if theta >= 90.0 {
            return 0.0;
        }
        v_avg / (4.0 * self.peak_frequency * theta.to_radians().tan())
    }
}

/// Depth-domain Ricker wavelet `(1 − 2π²k²ζ²) exp(−π²k²ζ²)`.
pub fn ricker(zeta: f64, k_p: f64) -> f64 {
    let a = (PI * k_p * zeta).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

fn lateral_taps(sigma: f64, step: f64, half: Option<usize>) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let g = |i: isize| (-0.5 * (i as f64 * step / sigma).powi(2)).exp();
    let mut h = half.unwrap_or((3.0 * sigma / step).ceil() as usize) as isize;
    if half.is_none() {
        while h > 0 && g(h) < LATERAL_TRIM {
            h -= 1;
        }
    }
    (-h..=h).map(g).collect()
}

/// PSF kernel shaped `[1, 1, kz, ky, kx]` for conv3d.
pub fn build_psf(cfg: &PsfConfig, v_avg: f64, dz: f64, dx: f64, dy: f64) -> Result<Tensor> {
    cfg.validate()?;
    if !(v_avg > 0.0 && dz > 0.0 && dx > 0.0 && dy > 0.0) {
        return Err(Error::invalid("PSF needs positive velocity and cell sizes"));
    }
    let k_p = cfg.peak_wavenumber(v_avg);
    let sigma = cfg.lateral_sigma(v_avg);
    if sigma > 0.0 && sigma < dx.min(dy) / 4.0 {
        log::warn!(
            "PSF lateral sigma {sigma:.3} m is below a quarter cell ({:.3} m); lateral blur is unresolved",
            dx.min(dy) / 4.0
        );
    }
    let hz = match cfg.kernel_extents {
        Some(k) => k[0] / 2,
        None => (RICKER_SUPPORT / (PI * k_p * dz)).ceil() as usize,
    };
    let vert: Vec<f64> = (-(hz as isize)..=hz as isize).map(|i| ricker(i as f64 * dz, k_p)).collect();
    let ty = lateral_taps(sigma, dy, cfg.kernel_extents.map(|k| k[1] / 2));
    let tx = lateral_taps(sigma, dx, cfg.kernel_extents.map(|k| k[2] / 2));
    let norm: f64 = ty.iter().sum::<f64>() * tx.iter().sum::<f64>();
    let mut data = Vec::with_capacity(vert.len() * ty.len() * tx.len());
    for w in &vert {
        for a in &ty {
            for b in &tx {
                data.push(w * a * b / norm);
            }
        }
    }
    Tensor::new(vec![1, 1, vert.len(), ty.len(), tx.len()], data)
}

/// Density and velocity of the burden-padded column stack, `[nz_padded, ny, nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticCube {
    /// g/cm³
    pub density: Tensor,
    /// m/s
    pub vp: Tensor,
}

impl ElasticCube {
    pub fn from_grid(grid: &ModelGrid, rock: &RockPhysicsParams, burden: &BurdenConfig) -> Result<Self> {
        rock.validate()?;
        let g = grid.geometry;
        let (above, below) = burden.cells(g.dz)?;
        let plane = g.nx * g.ny;
        let nzp = g.nz + above + below;
        let mut density = Vec::with_capacity(nzp * plane);
        let mut vp = Vec::with_capacity(nzp * plane);
        let mut push = |f: f64| -> Result<()> {
            let (r, v) = rock_physics(f, rock)?;
            density.push(r);
            vp.push(v);
            Ok(())
        };
        for _ in 0..above * plane {
            push(burden.fraction_above)?;
        }
        for &f in grid.coarse_fraction.data() {
            push(f)?;
        }
        for _ in 0..below * plane {
            push(burden.fraction_below)?;
        }
        let shape = vec![nzp, g.ny, g.nx];
        Ok(ElasticCube {
            density: Tensor::new(shape.clone(), density)?,
            vp: Tensor::new(shape, vp)?,
        })
    }

    pub fn impedance(&self) -> Tensor {
        let d = self.density.data().iter().zip(self.vp.data()).map(|(r, v)| r * v).collect();
        Tensor::new(self.density.shape().to_vec(), d).expect("matching shapes")
    }

    pub fn mean_vp(&self) -> f64 {
        self.vp.sum() / self.vp.numel() as f64
    }
}

/// Normal-incidence reflectivity between vertically adjacent cells,
/// `[nz_padded − 1, ny, nx]`.
pub fn reflectivity(cube: &ElasticCube) -> Result<Tensor> {
    let imp = cube.impedance();
    let s = imp.shape();
    if s[0] < 2 {
        return Err(Error::invalid("reflectivity needs at least two layers"));
    }
    let plane = s[1] * s[2];
    let d = imp.data();
    let out = (0..(s[0] - 1) * plane)
        .map(|i| {
            let (a, b) = (d[i], d[i + plane]);
            assert!(a + b > 0.0, "impedance must be positive");
            (b - a) / (b + a)
        })
        .collect();
    Tensor::new(vec![s[0] - 1, s[1], s[2]], out)
}

/// Seismic amplitudes, one sample per padded interface.
#[derive(Clone, Debug, PartialEq)]
pub struct SeismicCube {
    /// Geometry of the cube itself (`nz` counts interfaces).
    pub geometry: GridGeometry,
    /// `[nz, ny, nx]`
    pub amplitudes: Tensor,
}

/// Frozen seismic forward operator for one grid geometry.
#[derive(Clone, Debug)]
pub struct SeismicModel {
    geometry: GridGeometry,
    rock: RockPhysicsParams,
    burden: BurdenConfig,
    psf: PsfConfig,
    v_avg: f64,
    above: usize,
    below: usize,
    kernel: Tensor,
}

impl SeismicModel {
    pub fn new(
        geometry: GridGeometry,
        rock: RockPhysicsParams,
        burden: BurdenConfig,
        psf: PsfConfig,
        v_avg: f64,
    ) -> Result<Self> {
        rock.validate()?;
        let (above, below) = burden.cells(geometry.dz)?;
        if geometry.nz + above + below < 2 {
            return Err(Error::invalid("seismic model needs at least two padded layers"));
        }
        let kernel = build_psf(&psf, v_avg, geometry.dz, geometry.dx, geometry.dy)?;
        Ok(SeismicModel {
            geometry,
            rock,
            burden,
            psf,
            v_avg,
            above,
            below,
            kernel,
        })
    }

    /// Model whose average velocity is the configured one or, when absent,
    /// the mean Vp of the padded elastic cube of `reference`.
    pub fn for_grid(
        reference: &ModelGrid,
        rock: RockPhysicsParams,
        burden: BurdenConfig,
        psf: PsfConfig,
    ) -> Result<Self> {
        let v_avg = match psf.v_avg {
            Some(v) => v,
            None => ElasticCube::from_grid(reference, &rock, &burden)?.mean_vp(),
        };
        Self::new(reference.geometry, rock, burden, psf, v_avg)
    }

    pub fn v_avg(&self) -> f64 {
        self.v_avg
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn psf(&self) -> &PsfConfig {
        &self.psf
    }

    pub fn burden(&self) -> &BurdenConfig {
        &self.burden
    }

    /// Geometry of the produced cube.
    pub fn cube_geometry(&self) -> GridGeometry {
        GridGeometry {
            nz: self.geometry.nz + self.above + self.below - 1,
            ..self.geometry
        }
    }

    /// Records the forward model for a coarse-fraction variable `[nz, ny, nx]`.
    pub fn record(&self, tape: &mut Tape, coarse: Var) -> Result<Var> {
        let g = self.geometry;
        if tape.shape(coarse) != g.shape() {
            return Err(Error::Shape {
                op: "seismic forward",
                lhs: g.shape().to_vec(),
                rhs: tape.shape(coarse).to_vec(),
            });
        }
        let rock = self.rock;
        let imp = tape.map(coarse, move |f| impedance_and_derivative(f, &rock));
        let imp_above = elastic(self.burden.fraction_above, &rock).impedance();
        let imp_below = elastic(self.burden.fraction_below, &rock).impedance();
        let padded = tape.pad(imp, 0, self.above, 0, imp_above)?;
        let padded = tape.pad(padded, 0, 0, self.below, imp_below)?;
        let n = g.nz + self.above + self.below - 1;
        let upper = tape.slice(padded, 0, 0, n)?;
        let lower = tape.slice(padded, 0, 1, n)?;
        let num = tape.sub(lower, upper)?;
        let den = tape.add(lower, upper)?;
        let r = tape.div(num, den)?;
        self.record_convolution(tape, r)
    }

    /// Records the PSF convolution of a reflectivity variable `[n, ny, nx]`.
    pub fn record_convolution(&self, tape: &mut Tape, r: Var) -> Result<Var> {
        let s = tape.shape(r).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "seismic convolution",
                lhs: vec![0, self.geometry.ny, self.geometry.nx],
                rhs: s,
            });
        }
        let x = tape.reshape(r, &[1, s[0], s[1], s[2]])?;
        let w = tape.constant(self.kernel.clone());
        let y = tape.conv3d(x, w, None)?;
        tape.reshape(y, &s)
    }

    /// PSF convolution of a plain reflectivity tensor.
    pub fn convolve(&self, reflectivity: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Precision::F64);
        let r = tape.constant(reflectivity.clone());
        let y = self.record_convolution(&mut tape, r)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward(&self, grid: &ModelGrid) -> Result<SeismicCube> {
        if grid.geometry != self.geometry {
            return Err(Error::invalid("grid geometry does not match the seismic model"));
        }
        let cube = ElasticCube::from_grid(grid, &self.rock, &self.burden)?;
        let r = reflectivity(&cube)?;
        Ok(SeismicCube {
            geometry: self.cube_geometry(),
            amplitudes: self.convolve(&r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;

    fn small(nx: usize, ny: usize, nz: usize, dx: f64, dz: f64) -> GridGeometry {
        GridGeometry {
            nx,
            ny,
            nz,
            dx,
            dy: dx,
            dz,
        }
    }

    #[test]
    fn paper_scale_has_51_samples() {
        let g = GridGeometry::paper();
        let m = SeismicModel::new(g, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default(), 2500.0)
            .unwrap();
        assert_eq!(m.cube_geometry().nz, 51);
        let d = SeismicModel::new(
            GridGeometry::desk(),
            RockPhysicsParams::default(),
            BurdenConfig::default(),
            PsfConfig::default(),
            2500.0,
        )
        .unwrap();
        assert_eq!(d.cube_geometry().nz, 25);
    }

    #[test]
    fn ricker_values() {
        let k = 0.05;
        assert_eq!(ricker(0.0, k), 1.0);
        let z0 = 1.0 / (2f64.sqrt() * PI * k);
        assert!(ricker(z0, k).abs() < 1e-15);
    }

    #[test]
    fn vertical_illumination_collapses_laterally() {
        let cfg = PsfConfig {
            illumination_angle_deg: 90.0,
            ..PsfConfig::default()
        };
        let k = build_psf(&cfg, 2500.0, 0.5, 50.0, 50.0).unwrap();
        assert_eq!(&k.shape()[3..], &[1, 1]);
    }

    #[test]
    fn lateral_kernel_has_unit_sum() {
        let k = build_psf(&PsfConfig::default(), 2500.0, 0.5, 2.0, 2.0).unwrap();
        let s = k.shape().to_vec();
        assert!(s[3] > 1 && s[4] > 1);
        let centre = s[2] / 2;
        let plane = s[3] * s[4];
        let sum: f64 = k.data()[centre * plane..(centre + 1) * plane].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn even_extents_rejected() {
        let cfg = PsfConfig {
            kernel_extents: Some([4, 1, 1]),
            ..PsfConfig::default()
        };
        assert!(build_psf(&cfg, 2500.0, 0.5, 50.0, 50.0).is_err());
    }

    #[test]
    fn reflectivity_arithmetic() {
        let cube = ElasticCube {
            density: Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 3.0]).unwrap(),
            vp: Tensor::new(vec![3, 1, 1], vec![2.0, 2.0, 2.0]).unwrap(),
        };
        let r = reflectivity(&cube).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5]);
    }

    #[test]
    fn homogeneous_grid_gives_zero_cube() {
        let g = small(8, 8, 4, 50.0, 0.5);
        let grid = ModelGrid::constant(g, 0.0, 0.5);
        let m = SeismicModel::for_grid(&grid, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default())
            .unwrap();
        let s = m.forward(&grid).unwrap();
        assert!(s.amplitudes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_interface_reproduces_ricker() {
        let g = small(6, 5, 16, 50.0, 0.5);
        let coarse = Tensor::from_fn(vec![16, 5, 6], |i| if i / 30 >= 8 { 1.0 } else { 0.0 });
        let grid = ModelGrid::new(g, coarse, Tensor::zeros(vec![16, 5, 6])).unwrap();
        let burden = BurdenConfig {
            fraction_below: 1.0,
            ..BurdenConfig::default()
        };
        let psf = PsfConfig {
            illumination_angle_deg: 90.0,
            ..PsfConfig::default()
        };
        let rock = RockPhysicsParams::default();
        let m = SeismicModel::for_grid(&grid, rock, burden, psf).unwrap();
        let s = m.forward(&grid).unwrap();
        let i0 = elastic(0.0, &rock).impedance();
        let i1 = elastic(1.0, &rock).impedance();
        let r = (i1 - i0) / (i1 + i0);
        // interface between padded layers 18 + 7 and 18 + 8
        let at = 25usize;
        let k_p = psf.peak_wavenumber(m.v_avg());
        let half = m.kernel().shape()[2] / 2;
        for iz in 0..s.geometry.nz {
            let lag = iz as isize - at as isize;
            let want = if lag.unsigned_abs() <= half { r * ricker(lag as f64 * 0.5, k_p) } else { 0.0 };
            for col in 0..30 {
                let got = s.amplitudes.data()[iz * 30 + col];
                assert!((got - want).abs() < 1e-6, "iz {iz}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn convolution_is_linear() {
        let g = small(8, 8, 4, 5.0, 0.5);
        let m = SeismicModel::new(g, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default(), 2400.0)
            .unwrap();
        let n = m.cube_geometry().nz;
        let r = Tensor::from_fn(vec![n, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let a = m.convolve(&r).unwrap();
        let b = m.convolve(&r.map(|v| 2.0 * v)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = small(8, 8, 4, 50.0, 1.0);
        let m = SeismicModel::new(g, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default(), 2500.0)
            .unwrap();
        let p = Tensor::from_fn(vec![4, 8, 8], |i| 0.1 + 0.8 * ((i * 37) % 17) as f64 / 17.0);
        let r = gradient_check(
            |t, x| {
                let s = m.record(t, x)?;
                let q = t.square(s);
                Ok(t.sum(q))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }
}
