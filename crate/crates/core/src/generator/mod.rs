//! Deposit generators: latent vector (plus optional labels) to a two-channel
//! 3D grid of coarse-sediment fraction and normalized deposition time.

mod linear;
mod neural;
mod procedural;
mod weights;

pub use linear::LinearGenerator;
pub use neural::{Architecture, NeuralGenerator};
pub use procedural::{BeltParams, ProceduralGenerator};
pub use weights::{load_weights, read_weights, save_weights, write_weights, GeneratorSpec, GeneratorWeights, ParamSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Names of the conditioning labels, in order.
pub const LABEL_NAMES: [&str; 5] = [
    "coarse_grain_diameter",
    "fine_grain_diameter",
    "bank_erodibility",
    "mean_aggradation_rate",
    "mean_storm_rainfall",
];

/// Index of the aggradation-rate label in [`LABEL_NAMES`].
pub const AGGRADATION_LABEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(d: usize) -> Self {
        LatentVector(vec![0.0; d])
    }
    pub fn dim(&self) -> usize {
        self.0.len()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.0.clone())
    }
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl LabelVector {
    pub fn new(values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if values.len() != names.len() {
            return Err(Error::invalid("label values and names differ in length"));
        }
        if let Some((n, v)) = names.iter().zip(&values).find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("label {n} = {v} outside [0, 1]")));
        }
        Ok(LabelVector { values, names })
    }

    /// All labels at the middle of their range.
    pub fn neutral(k: usize) -> Self {
        let names = (0..k)
            .map(|i| LABEL_NAMES.get(i).map_or_else(|| format!("label{i}"), |s| s.to_string()))
            .collect();
        LabelVector {
            values: vec![0.5; k],
            names,
        }
    }

    /// Values with the default names, validated to `[0, 1]`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let names = Self::neutral(values.len()).names;
        Self::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Grid extents and cell sizes (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridGeometry {
    /// 128 × 128 × 16 cells of 50 × 50 × 0.5 m.
    pub fn paper() -> Self {
        GridGeometry {
            nx: 128,
            ny: 128,
            nz: 16,
            dx: 50.0,
            dy: 50.0,
            dz: 0.5,
        }
    }

    /// 32 × 32 × 8 cells covering the same 6.4 km × 6.4 km × 8 m volume.
    pub fn desk() -> Self {
        GridGeometry {
            nx: 32,
            ny: 32,
            nz: 8,
            dx: 200.0,
            dy: 200.0,
            dz: 1.0,
        }
    }

    /// Tensor shape `[nz, ny, nx]` of one property channel.
    pub fn shape(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }
}

/// Two-channel property grid, both channels shaped `[nz, ny, nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrid {
    pub geometry: GridGeometry,
    pub coarse_fraction: Tensor,
    pub depo_time: Tensor,
}

impl ModelGrid {
    pub fn new(geometry: GridGeometry, coarse_fraction: Tensor, depo_time: Tensor) -> Result<Self> {
        let shape = geometry.shape();
        for (name, t) in [("coarse_fraction", &coarse_fraction), ("depo_time", &depo_time)] {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "model grid",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            if let Some(i) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("{name} value {} at {i} outside [0, 1]", t.data()[i])));
            }
        }
        Ok(ModelGrid {
            geometry,
            coarse_fraction,
            depo_time,
        })
    }

    pub fn constant(geometry: GridGeometry, coarse: f64, depo: f64) -> Self {
        ModelGrid {
            geometry,
            coarse_fraction: Tensor::full(geometry.shape().to_vec(), coarse),
            depo_time: Tensor::full(geometry.shape().to_vec(), depo),
        }
    }

    pub fn coarse_at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.coarse_fraction.data()[self.geometry.index(ix, iy, iz)]
    }

    /// Vertical mean of the coarse fraction, shaped `[ny, nx]` row-major.
    pub fn vertical_mean_coarse(&self) -> Vec<f64> {
        let g = self.geometry;
        let mut out = vec![0.0; g.nx * g.ny];
        for iz in 0..g.nz {
            for (o, v) in out
                .iter_mut()
                .zip(&self.coarse_fraction.data()[iz * g.nx * g.ny..(iz + 1) * g.nx * g.ny])
            {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= g.nz as f64);
        out
    }
}

/// Tape handles for a generated grid, each `[nz, ny, nx]`.
#[derive(Clone, Copy, Debug)]
pub struct GridVars {
    pub coarse: Var,
    pub depo: Var,
}

/// A differentiable map from latent (and labels) to a [`ModelGrid`].
///
/// Parameters are exposed as an ordered [`ParamSet`] so callers can record
/// them as trainable leaves (pivotal tuning) or as constants.
pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn label_dim(&self) -> usize;
    fn geometry(&self) -> GridGeometry;
    fn params(&self) -> &ParamSet;

    /// Copy of this generator with replaced parameters (same names and shapes).
    fn with_params(&self, params: ParamSet) -> Result<Self>
    where
        Self: Sized;

    /// Records the forward pass. `params` holds one tape variable per entry
    /// of [`Generator::params`], in order. `labels` of `None` means neutral.
    fn forward(&self, tape: &mut Tape, z: Var, labels: Option<Var>, params: &[Var]) -> Result<GridVars>;

    /// Whether outputs are guaranteed to lie in `[0, 1]`.
    fn bounded(&self) -> bool {
        true
    }

    /// Records the parameters on `tape`, trainable or constant.
    fn param_vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .tensors()
            .map(|t| if trainable { tape.input(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn check_inputs(&self, z: &LatentVector, labels: Option<&LabelVector>) -> Result<()> {
        if z.dim() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent dimension {} does not match generator ({})",
                z.dim(),
                self.latent_dim()
            )));
        }
        if z.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent vector has non-finite components"));
        }
        if let Some(l) = labels {
            if l.len() != self.label_dim() {
                return Err(Error::invalid(format!(
                    "label dimension {} does not match generator ({})",
                    l.len(),
                    self.label_dim()
                )));
            }
        }
        Ok(())
    }

    /// Plain forward evaluation in the default 32-bit storage mode.
    fn generate(&self, z: &LatentVector, labels: Option<&LabelVector>) -> Result<ModelGrid> {
        self.generate_with(z, labels, Precision::F32)
    }

    fn generate_with(&self, z: &LatentVector, labels: Option<&LabelVector>, precision: Precision) -> Result<ModelGrid> {
        self.check_inputs(z, labels)?;
        let mut tape = Tape::new(precision);
        let zv = tape.constant(z.to_tensor());
        let lv = labels.filter(|l| !l.is_empty()).map(|l| tape.constant(Tensor::from_vec(l.values.clone())));
        let pv = self.param_vars(&mut tape, false);
        let out = self.forward(&mut tape, zv, lv, &pv)?;
        let grid = ModelGrid {
            geometry: self.geometry(),
            coarse_fraction: tape.value(out.coarse).clone(),
            depo_time: tape.value(out.depo).clone(),
        };
        if self.bounded() {
            debug_assert!(
                grid.coarse_fraction.data().iter().chain(grid.depo_time.data()).all(|v| (0.0..=1.0).contains(v)),
                "generator output outside [0, 1]"
            );
        }
        Ok(grid)
    }
}

/// `n` i.i.d. standard-normal latent vectors; vector `i` depends only on
/// `(seed, i)`.
pub fn sample_prior(n: usize, d: usize, seed: u64) -> Result<Vec<LatentVector>> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("sample_prior needs n >= 1 and d >= 1"));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| LatentVector(rng::normals(&mut rng::stream(seed, i as u64), d)))
        .collect())
}

/// Either shipped generator, selected at run time.
#[derive(Clone, Debug)]
pub enum AnyGenerator {
    Procedural(ProceduralGenerator),
    Neural(NeuralGenerator),
}

impl AnyGenerator {
    pub fn from_weights(w: GeneratorWeights) -> Result<Self> {
        match w.spec {
            GeneratorSpec::Procedural { geometry, latent_dim } => Ok(AnyGenerator::Procedural(
                ProceduralGenerator::new(geometry, latent_dim)?.with_params(w.params)?,
            )),
            GeneratorSpec::Neural(arch) => Ok(AnyGenerator::Neural(NeuralGenerator::from_params(arch, w.params)?)),
        }
    }

    pub fn to_weights(&self) -> GeneratorWeights {
        match self {
            AnyGenerator::Procedural(g) => g.to_weights(),
            AnyGenerator::Neural(g) => g.to_weights(),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $g:ident => $e:expr) => {
        match $self {
            AnyGenerator::Procedural($g) => $e,
            AnyGenerator::Neural($g) => $e,
        }
    };
}

impl Generator for AnyGenerator {
    fn latent_dim(&self) -> usize {
        delegate!(self, g => g.latent_dim())
    }
    fn label_dim(&self) -> usize {
        delegate!(self, g => g.label_dim())
    }
    fn geometry(&self) -> GridGeometry {
        delegate!(self, g => g.geometry())
    }
    fn params(&self) -> &ParamSet {
        delegate!(self, g => g.params())
    }
    fn with_params(&self, params: ParamSet) -> Result<Self> {
        Ok(match self {
            AnyGenerator::Procedural(g) => AnyGenerator::Procedural(g.with_params(params)?),
            AnyGenerator::Neural(g) => AnyGenerator::Neural(g.with_params(params)?),
        })
    }
    fn forward(&self, tape: &mut Tape, z: Var, labels: Option<Var>, params: &[Var]) -> Result<GridVars> {
        delegate!(self, g => g.forward(tape, z, labels, params))
    }
}
