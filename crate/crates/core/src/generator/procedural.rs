//! Analytic channel-belt model with a known ground truth.
//!
//! The first eight latent components pass through fixed `tanh` squashing
//! maps to interpretable belt parameters. Lateral coordinates are
//! normalized to `(0, 1)`, so parameters are independent of grid extents.
//! For layer `m` the centerline is
//!
//! ```text
//! y_c(x, m) = y0 + drift·m + A·sin(2πx/λ + φ + m·Δφ)
//! ```
//!
//! and the coarse fraction is `sigmoid((w − |y − y_c|) / s)`, with a smooth
//! absolute value so the grid is differentiable everywhere. Deposition time
//! starts from the layer age (tilted along x) and is pulled toward 1 inside
//! the channel core by a reworking factor driven by the aggradation label.

use std::f64::consts::PI;

use super::weights::{GeneratorSpec, GeneratorWeights, ParamSet};
use super::{Generator, GridGeometry, GridVars, LabelVector, LatentVector, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Number of latent components consumed by the belt parameters.
pub const BELT_PARAMS: usize = 8;

/// Smoothing length of `|y − y_c|`, in normalized units.
const ABS_EPS: f64 = 1e-3;

/// Default squashing maps as `(offset, gain)` per belt parameter:
/// center, ln half-width, ln amplitude, ln wavelength, phase, drift,
/// ln sharpness, tilt.
const DEFAULT_MAPS: [(f64, f64); BELT_PARAMS] = [
    (0.5, 0.3),
    (-2.1, 0.4),
    (-2.3, 0.6),
    (-0.5, 0.5),
    (0.0, PI),
    (0.0, 0.02),
    (-3.5, 0.4),
    (0.0, 0.5),
];

/// Belt parameters in normalized lateral units, as evaluated for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct BeltParams {
    pub center: f64,
    pub half_width: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    pub phase: f64,
    pub drift: f64,
    pub sharpness: f64,
    pub tilt: f64,
    pub layer_phase: f64,
    pub rework: f64,
}

#[derive(Clone, Debug)]
pub struct ProceduralGenerator {
    geometry: GridGeometry,
    latent_dim: usize,
    params: ParamSet,
}

struct BeltVars {
    center: Var,
    half_width: Var,
    amplitude: Var,
    wavelength: Var,
    phase: Var,
    drift: Var,
    sharpness: Var,
    tilt: Var,
    layer_phase: Var,
    rework: Var,
}

impl ProceduralGenerator {
    pub fn new(geometry: GridGeometry, latent_dim: usize) -> Result<Self> {
        if geometry.nx < 8 || geometry.ny < 8 || geometry.nz < 4 {
            return Err(Error::invalid(format!(
                "procedural generator needs at least 8x8x4 cells, got {}x{}x{}",
                geometry.nx, geometry.ny, geometry.nz
            )));
        }
        if latent_dim < BELT_PARAMS {
            return Err(Error::invalid(format!(
                "procedural generator needs latent dimension >= {BELT_PARAMS}, got {latent_dim}"
            )));
        }
        let mut params = ParamSet::new();
        let maps = DEFAULT_MAPS.iter().flat_map(|&(o, g)| [o, g]).collect();
        params.push("maps", Tensor::new(vec![BELT_PARAMS, 2], maps)?);
        Ok(ProceduralGenerator {
            geometry,
            latent_dim,
            params,
        })
    }

    pub fn to_weights(&self) -> GeneratorWeights {
        GeneratorWeights {
            spec: GeneratorSpec::Procedural {
                geometry: self.geometry,
                latent_dim: self.latent_dim,
            },
            params: self.params.clone(),
        }
    }

    fn belt(&self, tape: &mut Tape, z: Var, labels: Option<Var>, maps: Var) -> Result<BeltVars> {
        let zs = tape.slice(z, 0, 0, BELT_PARAMS)?;
        let u = tape.scale(zs, 0.5);
        let u = tape.tanh(u);
        let off = tape.slice(maps, 1, 0, 1)?;
        let off = tape.reshape(off, &[BELT_PARAMS])?;
        let gain = tape.slice(maps, 1, 1, 1)?;
        let gain = tape.reshape(gain, &[BELT_PARAMS])?;
        let raw = tape.mul(gain, u)?;
        let raw = tape.add(raw, off)?;

        let labels = match labels {
            Some(l) => l,
            None => tape.constant(Tensor::from_vec(LabelVector::neutral(LABEL_NAMES.len()).values)),
        };
        // label factor c0 + c1 * label
        let factor = |tape: &mut Tape, i: usize, c0: f64, c1: f64| -> Result<Var> {
            let l = tape.slice(labels, 0, i, 1)?;
            Ok(tape.affine(l, c1, c0))
        };
        let f_coarse = factor(tape, 0, 0.8, 0.4)?;
        let f_fine = factor(tape, 1, 0.7, 0.6)?;
        let f_erode = factor(tape, 2, 0.6, 0.8)?;
        let layer_phase = factor(tape, 2, 0.15, 0.5)?;
        let rework = factor(tape, 3, 0.8, -0.7)?;
        let f_rain = factor(tape, 4, 1.2, -0.4)?;

        let pick = |tape: &mut Tape, i: usize| tape.slice(raw, 0, i, 1);
        let center = pick(tape, 0)?;
        let hw = pick(tape, 1)?;
        let hw = tape.exp(hw);
        let half_width = tape.mul(hw, f_coarse)?;
        let amp = pick(tape, 2)?;
        let amp = tape.exp(amp);
        let amplitude = tape.mul(amp, f_erode)?;
        let wl = pick(tape, 3)?;
        let wl = tape.exp(wl);
        let wavelength = tape.mul(wl, f_rain)?;
        let phase = pick(tape, 4)?;
        let drift = pick(tape, 5)?;
        let sh = pick(tape, 6)?;
        let sh = tape.exp(sh);
        let sharpness = tape.mul(sh, f_fine)?;
        let tilt = pick(tape, 7)?;
        Ok(BeltVars {
            center,
            half_width,
            amplitude,
            wavelength,
            phase,
            drift,
            sharpness,
            tilt,
            layer_phase,
            rework,
        })
    }

    /// Belt parameters for `(z, labels)` with the current maps.
    pub fn belt_params(&self, z: &LatentVector, labels: Option<&LabelVector>) -> Result<BeltParams> {
        self.check_inputs(z, labels)?;
        let mut tape = Tape::new(Precision::F64);
        let zv = tape.constant(z.to_tensor());
        let lv = labels.map(|l| tape.constant(Tensor::from_vec(l.values.clone())));
        let maps = tape.constant(self.params.get("maps").unwrap().clone());
        let b = self.belt(&mut tape, zv, lv, maps)?;
        let v = |x: Var| tape.value(x).item();
        Ok(BeltParams {
            center: v(b.center),
            half_width: v(b.half_width),
            amplitude: v(b.amplitude),
            wavelength: v(b.wavelength),
            phase: v(b.phase),
            drift: v(b.drift),
            sharpness: v(b.sharpness),
            tilt: v(b.tilt),
            layer_phase: v(b.layer_phase),
            rework: v(b.rework),
        })
    }
}

impl Generator for ProceduralGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn label_dim(&self) -> usize {
        LABEL_NAMES.len()
    }

    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn with_params(&self, params: ParamSet) -> Result<Self> {
        params.check_layout(&[("maps".to_string(), vec![BELT_PARAMS, 2])])?;
        Ok(ProceduralGenerator {
            params,
            ..self.clone()
        })
    }

    fn forward(&self, tape: &mut Tape, z: Var, labels: Option<Var>, params: &[Var]) -> Result<GridVars> {
        let g = self.geometry;
        if tape.shape(z) != [self.latent_dim] {
            return Err(Error::Shape {
                op: "procedural latent",
                lhs: vec![self.latent_dim],
                rhs: tape.shape(z).to_vec(),
            });
        }
        if let Some(l) = labels {
            if tape.shape(l) != [LABEL_NAMES.len()] {
                return Err(Error::Shape {
                    op: "procedural labels",
                    lhs: vec![LABEL_NAMES.len()],
                    rhs: tape.shape(l).to_vec(),
                });
            }
        }
        let [maps] = params else {
            return Err(Error::invalid("procedural generator takes one parameter tensor"));
        };
        let b = self.belt(tape, z, labels, *maps)?;

        let nx = g.nx as f64;
        let xn = Tensor::from_fn(vec![1, 1, g.nx], |i| (i as f64 + 0.5) / nx);
        let two_pi_x = tape.constant(xn.map(|v| 2.0 * PI * v));
        let x_centered = tape.constant(xn.map(|v| 2.0 * v - 1.0));
        let yn = tape.constant(Tensor::from_fn(vec![1, g.ny, 1], |i| (i as f64 + 0.5) / g.ny as f64));
        let layer = tape.constant(Tensor::from_fn(vec![g.nz, 1, 1], |i| i as f64));

        // centerline [nz, 1, nx]
        let kx = tape.div(two_pi_x, b.wavelength)?;
        let km = tape.mul(layer, b.layer_phase)?;
        let arg = tape.add(kx, km)?;
        let arg = tape.add(arg, b.phase)?;
        let s = tape.sin(arg);
        let meander = tape.mul(s, b.amplitude)?;
        let shift = tape.mul(layer, b.drift)?;
        let yc = tape.add(meander, shift)?;
        let yc = tape.add(yc, b.center)?;

        // coarse fraction [nz, ny, nx]
        let dy = tape.sub(yn, yc)?;
        let d2 = tape.square(dy);
        let d2 = tape.offset(d2, ABS_EPS * ABS_EPS);
        let dist = tape.sqrt(d2);
        let inside = tape.sub(b.half_width, dist)?;
        let inside = tape.div(inside, b.sharpness)?;
        let coarse = tape.sigmoid(inside);

        // deposition time
        let tilt = tape.mul(x_centered, b.tilt)?;
        let tilt = tape.scale(tilt, 0.5);
        let age = tape.add(layer, tilt)?;
        let age = tape.affine(age, 1.0 / g.nz as f64, 0.5 / g.nz as f64);
        let young = tape.affine(age, -1.0, 1.0);
        let pull = tape.mul(coarse, b.rework)?;
        let pull = tape.mul(pull, young)?;
        let depo = tape.add(age, pull)?;

        Ok(GridVars { coarse, depo })
    }
}
