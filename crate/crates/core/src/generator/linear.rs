use super::weights::ParamSet;
use super::{Generator, GridGeometry, GridVars};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Affine test generator `coarse = A z + b` (reshaped to the grid), with
/// deposition time equal to the coarse channel. Outputs are unbounded.
///
/// Used to verify inversion methods against closed-form least-squares and
/// conjugate-Gaussian answers.
#[derive(Clone, Debug)]
pub struct LinearGenerator {
    geometry: GridGeometry,
    latent_dim: usize,
    params: ParamSet,
}

impl LinearGenerator {
    pub fn new(geometry: GridGeometry, matrix: Tensor, offset: Tensor) -> Result<Self> {
        let cells = geometry.cells();
        if matrix.shape().len() != 2 || matrix.shape()[0] != cells || offset.shape() != [cells] {
            return Err(Error::Shape {
                op: "linear generator",
                lhs: vec![cells],
                rhs: matrix.shape().to_vec(),
            });
        }
        let latent_dim = matrix.shape()[1];
        let mut params = ParamSet::new();
        params.push("matrix", matrix);
        params.push("offset", offset);
        Ok(LinearGenerator {
            geometry,
            latent_dim,
            params,
        })
    }

    /// Gaussian random matrix scaled by `scale / sqrt(d)`, offset 0.5.
    pub fn random(geometry: GridGeometry, latent_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let cells = geometry.cells();
        let mut r = rng::stream(seed, 0);
        let s = scale / (latent_dim as f64).sqrt();
        let matrix = Tensor::from_fn(vec![cells, latent_dim], |_| s * rng::normal(&mut r));
        Self::new(geometry, matrix, Tensor::full(vec![cells], 0.5))
    }

    pub fn matrix(&self) -> &Tensor {
        self.params.get("matrix").unwrap()
    }

    pub fn offset(&self) -> &Tensor {
        self.params.get("offset").unwrap()
    }
}

impl Generator for LinearGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn label_dim(&self) -> usize {
        0
    }
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn bounded(&self) -> bool {
        false
    }
    fn with_params(&self, params: ParamSet) -> Result<Self> {
        let mut it = params.tensors();
        let (m, o) = (it.next().cloned(), it.next().cloned());
        match (m, o) {
            (Some(m), Some(o)) => Self::new(self.geometry, m, o),
            _ => Err(Error::invalid("linear generator takes matrix and offset")),
        }
    }
    fn forward(&self, tape: &mut Tape, z: Var, _labels: Option<Var>, params: &[Var]) -> Result<GridVars> {
        let [m, o] = params else {
            return Err(Error::invalid("linear generator takes two parameter tensors"));
        };
        let y = tape.dense(*m, z, Some(*o))?;
        let coarse = tape.reshape(y, &self.geometry.shape())?;
        Ok(GridVars { coarse, depo: coarse })
    }
}
