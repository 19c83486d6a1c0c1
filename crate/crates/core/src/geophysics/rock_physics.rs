//! Unconsolidated shaly-sand rock physics: coarse fraction to density and
//! P-wave velocity.
//!
//! Chain (Mavko, Mukerji & Dvorkin, *The Rock Physics Handbook*; Avseth et
//! al., *Quantitative Seismic Interpretation*):
//!
//! 1. Mineral moduli by Voigt-Reuss-Hill averaging of quartz (fraction `f`)
//!    and clay (`1 − f`):
//!    `M_V = f M_q + (1−f) M_c`, `M_R = 1 / (f/M_q + (1−f)/M_c)`,
//!    `M = (M_V + M_R) / 2`.
//! 2. Porosity mixes linearly between the end members:
//!    `φ = f φ_q + (1−f) φ_c`.
//! 3. Hertz-Mindlin moduli at critical porosity `φ_0` and effective
//!    pressure `P`, coordination number `n`, mineral Poisson ratio `ν`:
//!    `K_HM = [n² (1−φ_0)² G² P / (18 π² (1−ν)²)]^(1/3)`,
//!    `G_HM = (5−4ν)/(5(2−ν)) · [3 n² (1−φ_0)² G² P / (2 π² (1−ν)²)]^(1/3)`.
//! 4. Dry frame by the modified Hashin-Shtrikman lower bound
//!    (friable-sand model), with `a = φ/φ_0`:
//!    `K_dry = [a/(K_HM + 4/3 G_HM) + (1−a)/(K + 4/3 G_HM)]⁻¹ − 4/3 G_HM`,
//!    `ζ = G_HM/6 · (9K_HM + 8G_HM)/(K_HM + 2G_HM)`,
//!    `G_dry = [a/(G_HM + ζ) + (1−a)/(G + ζ)]⁻¹ − ζ`.
//! 5. Gassmann saturation with water:
//!    `K_sat = K_dry + (1 − K_dry/K)² / (φ/K_w + (1−φ)/K − K_dry/K²)`,
//!    `G_sat = G_dry`.
//! 6. Bulk density of the volumetric mixture of the two water-saturated end
//!    members, `ρ = f ρ_sat,q + (1−f) ρ_sat,c` with
//!    `ρ_sat = (1−φ) ρ_mineral + φ ρ_w`.
//! 7. `Vp = sqrt((K_sat + 4/3 G_sat) / ρ)`; GPa over g/cm³ gives km²/s², so
//!    the result is scaled by 1000 to m/s.
//!
//! Everything is generic over [`Real`] so the same code yields values and,
//! through [`Dual`], exact derivatives with respect to `f`.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mineral {
    /// g/cm³
    pub density: f64,
    /// Porosity of the pure end member.
    pub porosity: f64,
    /// GPa
    pub bulk_modulus: f64,
    /// GPa
    pub shear_modulus: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockPhysicsParams {
    pub quartz: Mineral,
    pub clay: Mineral,
    pub water_density: f64,
    pub water_bulk_modulus: f64,
    pub critical_porosity: f64,
    /// GPa
    pub effective_pressure: f64,
    pub coordination_number: f64,
}

impl Default for RockPhysicsParams {
    fn default() -> Self {
        RockPhysicsParams {
            quartz: Mineral {
                density: 2.65,
                porosity: 0.27,
                bulk_modulus: 37.0,
                shear_modulus: 44.0,
            },
            clay: Mineral {
                density: 2.6,
                porosity: 0.14,
                bulk_modulus: 21.0,
                shear_modulus: 7.0,
            },
            water_density: 1.0,
            water_bulk_modulus: 2.29,
            critical_porosity: 0.5,
            effective_pressure: 0.010,
            coordination_number: 8.5,
        }
    }
}

impl RockPhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let moduli = [
            self.quartz.bulk_modulus,
            self.quartz.shear_modulus,
            self.clay.bulk_modulus,
            self.clay.shear_modulus,
            self.water_bulk_modulus,
            self.effective_pressure,
            self.coordination_number,
        ];
        if moduli.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("rock physics moduli must be > 0"));
        }
        for m in [self.quartz, self.clay] {
            if !(m.porosity > 0.0 && m.porosity < self.critical_porosity) {
                return Err(Error::invalid("end-member porosity must lie in (0, critical porosity)"));
            }
        }
        if !(self.critical_porosity < 1.0) {
            return Err(Error::invalid("critical porosity must be < 1"));
        }
        Ok(())
    }
}

/// Scalar arithmetic needed by the rock-physics chain.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn cbrt(self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn cbrt(self) -> Self {
        f64::cbrt(self)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        f64::clamp(self, lo, hi)
    }
}

/// Forward-mode dual number `v + d ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn var(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual { v: r, d: self.d * 0.5 / r }
    }
    fn cbrt(self) -> Self {
        let r = self.v.cbrt();
        Dual {
            v: r,
            d: self.d / (3.0 * r * r),
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.v < lo {
            Dual::cst(lo)
        } else if self.v > hi {
            Dual::cst(hi)
        } else {
            self
        }
    }
}

/// Every intermediate of the chain for one coarse fraction.
#[derive(Clone, Copy, Debug)]
pub struct Elastic<T> {
    pub porosity: T,
    pub k_mineral: T,
    pub g_mineral: T,
    pub k_hm: T,
    pub g_hm: T,
    pub k_dry: T,
    pub g_dry: T,
    pub k_sat: T,
    pub g_sat: T,
    /// g/cm³
    pub density: T,
    /// m/s
    pub vp: T,
}

impl<T: Real> Elastic<T> {
    /// Acoustic impedance in (g/cm³)·(m/s).
    pub fn impedance(&self) -> T {
        self.density * self.vp
    }
}

fn vrh<T: Real>(f: T, a: f64, b: f64) -> T {
    let one = T::cst(1.0);
    let voigt = f * T::cst(a) + (one - f) * T::cst(b);
    let reuss = one / (f / T::cst(a) + (one - f) / T::cst(b));
    (voigt + reuss) * T::cst(0.5)
}

/// Runs the chain for coarse fraction `f` (expected in `[0, 1]`).
pub fn elastic<T: Real>(f: T, p: &RockPhysicsParams) -> Elastic<T> {
    let c = T::cst;
    let one = c(1.0);
    let (q, cl) = (&p.quartz, &p.clay);
    let k = vrh(f, q.bulk_modulus, cl.bulk_modulus);
    let g = vrh(f, q.shear_modulus, cl.shear_modulus);

    let phi0 = p.critical_porosity;
    let phi = (f * c(q.porosity) + (one - f) * c(cl.porosity)).clamp(1e-6, phi0 - 1e-6);

    // Hertz-Mindlin at critical porosity
    let nu = (c(3.0) * k - c(2.0) * g) / (c(2.0) * (c(3.0) * k + g));
    let n2 = p.coordination_number * p.coordination_number;
    let s = c(n2 * (1.0 - phi0) * (1.0 - phi0) * p.effective_pressure) * g * g / ((one - nu) * (one - nu));
    let k_hm = (s / c(18.0 * PI * PI)).cbrt();
    let g_hm = (c(5.0) - c(4.0) * nu) / (c(5.0) * (c(2.0) - nu)) * (c(3.0) * s / c(2.0 * PI * PI)).cbrt();

    // modified Hashin-Shtrikman lower bound
    let a = phi / c(phi0);
    let g43 = c(4.0 / 3.0) * g_hm;
    let k_dry = one / (a / (k_hm + g43) + (one - a) / (k + g43)) - g43;
    let zeta = g_hm / c(6.0) * (c(9.0) * k_hm + c(8.0) * g_hm) / (k_hm + c(2.0) * g_hm);
    let g_dry = one / (a / (g_hm + zeta) + (one - a) / (g + zeta)) - zeta;

    // Gassmann
    let kw = c(p.water_bulk_modulus);
    let b = one - k_dry / k;
    let k_sat = k_dry + b * b / (phi / kw + (one - phi) / k - k_dry / (k * k));
    let g_sat = g_dry;

    let rho_q = (1.0 - q.porosity) * q.density + q.porosity * p.water_density;
    let rho_c = (1.0 - cl.porosity) * cl.density + cl.porosity * p.water_density;
    let density = f * c(rho_q) + (one - f) * c(rho_c);
    let vp = c(1000.0) * ((k_sat + c(4.0 / 3.0) * g_sat) / density).sqrt();

    Elastic {
        porosity: phi,
        k_mineral: k,
        g_mineral: g,
        k_hm,
        g_hm,
        k_dry,
        g_dry,
        k_sat,
        g_sat,
        density,
        vp,
    }
}

/// Gassmann's saturated bulk modulus.
pub fn gassmann_k_sat(k_dry: f64, k_mineral: f64, k_fluid: f64, porosity: f64) -> f64 {
    let b = 1.0 - k_dry / k_mineral;
    k_dry + b * b / (porosity / k_fluid + (1.0 - porosity) / k_mineral - k_dry / (k_mineral * k_mineral))
}

/// `(ρ [g/cm³], Vp [m/s])` for coarse fraction `f`.
pub fn rock_physics(f: f64, p: &RockPhysicsParams) -> Result<(f64, f64)> {
    if !(-1e-9..=1.0 + 1e-9).contains(&f) {
        return Err(Error::invalid(format!("coarse fraction {f} outside [0, 1]")));
    }
    let e = elastic(f.clamp(0.0, 1.0), p);
    Ok((e.density, e.vp))
}

/// Impedance and its derivative with respect to the coarse fraction.
/// Inputs are clamped to `[0, 1]`.
pub fn impedance_and_derivative(f: f64, p: &RockPhysicsParams) -> (f64, f64) {
    let x = if f < 0.0 {
        Dual::cst(0.0)
    } else if f > 1.0 {
        Dual::cst(1.0)
    } else {
        Dual::var(f)
    };
    let i = elastic(x, p).impedance();
    (i.v, i.d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> RockPhysicsParams {
        RockPhysicsParams::default()
    }

    #[test]
    fn density_endpoints() {
        let (r1, _) = rock_physics(1.0, &p()).unwrap();
        let (r0, _) = rock_physics(0.0, &p()).unwrap();
        assert!((r1 - (0.73 * 2.65 + 0.27 * 1.0)).abs() < 1e-12);
        assert!((r0 - (0.86 * 2.6 + 0.14 * 1.0)).abs() < 1e-12);
        assert!((r1 - 2.2045).abs() < 1e-12);
        assert!((r0 - 2.376).abs() < 1e-12);
    }

    #[test]
    fn density_is_affine() {
        let (r0, _) = rock_physics(0.0, &p()).unwrap();
        let (r1, _) = rock_physics(1.0, &p()).unwrap();
        for i in 0..=100 {
            let f = i as f64 / 100.0;
            let (r, _) = rock_physics(f, &p()).unwrap();
            assert!((r - (r0 + f * (r1 - r0))).abs() < 1e-12);
        }
    }

    #[test]
    fn gassmann_limit_returns_mineral_modulus() {
        assert!((gassmann_k_sat(37.0, 37.0, 2.29, 0.2) - 37.0).abs() < 1e-12);
    }

    #[test]
    fn gassmann_stiffens_and_keeps_shear() {
        for i in 0..=100 {
            let e = elastic(i as f64 / 100.0, &p());
            assert!(e.k_sat >= e.k_dry);
            assert_eq!(e.g_sat, e.g_dry);
        }
    }

    #[test]
    fn vp_strictly_increasing() {
        let mut prev = 0.0;
        for i in 0..=100 {
            let (_, vp) = rock_physics(i as f64 / 100.0, &p()).unwrap();
            assert!(vp > prev);
            prev = vp;
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(rock_physics(1.1, &p()).is_err());
        assert!(rock_physics(-0.01, &p()).is_err());
        assert!(rock_physics(1.0 + 1e-10, &p()).is_ok());
    }

    #[test]
    fn dual_derivative_matches_central_difference() {
        for i in 1..20 {
            let f = i as f64 / 20.0;
            let (_, d) = impedance_and_derivative(f, &p());
            let h = 1e-6;
            let num = (elastic(f + h, &p()).impedance() - elastic(f - h, &p()).impedance()) / (2.0 * h);
            assert!((d - num).abs() <= 1e-6 * num.abs().max(1.0), "{d} vs {num}");
        }
    }

    #[test]
    fn velocity_in_plausible_range() {
        // unconsolidated water-saturated sands
        for f in [0.0, 0.5, 1.0] {
            let (_, vp) = rock_physics(f, &p()).unwrap();
            assert!((1800.0..3500.0).contains(&vp), "{vp}");
        }
    }
}
