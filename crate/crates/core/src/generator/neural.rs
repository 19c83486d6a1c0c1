//! Residual up-sampling generator.
//!
//! `[z; labels]` is projected by a dense layer to a seed tensor of
//! `base_channels` channels at `extents / 2^n_blocks`. Each residual block
//! upsamples by two (nearest neighbour) and sums a main path
//! `conv3 → leaky-ReLU → conv3` with a skip path `conv1`, followed by a
//! leaky-ReLU. A `conv3` head maps to two channels, squashed by `tanh` and
//! rescaled to `[0, 1]`.

use serde::{Deserialize, Serialize};

use super::weights::{GeneratorSpec, GeneratorWeights, ParamSet};
use super::{Generator, GridGeometry, GridVars};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    #[serde(default)]
    pub label_dim: usize,
    pub base_channels: usize,
    pub n_blocks: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Output extents and cell sizes.
    pub geometry: GridGeometry,
}

fn default_kernel() -> usize {
    3
}

fn default_slope() -> f64 {
    0.2
}

impl Architecture {
    /// 32×32×8 output, latent 16, two residual blocks.
    pub fn desk() -> Self {
        Architecture {
            latent_dim: 16,
            label_dim: 0,
            base_channels: 8,
            n_blocks: 2,
            kernel: 3,
            leaky_slope: 0.2,
            geometry: GridGeometry::desk(),
        }
    }

    /// 128×128×16 output, latent 128, four residual blocks.
    pub fn paper() -> Self {
        Architecture {
            latent_dim: 128,
            label_dim: 0,
            base_channels: 32,
            n_blocks: 4,
            kernel: 3,
            leaky_slope: 0.2,
            geometry: GridGeometry::paper(),
        }
    }

    /// 16×16×4 output with two channels, for derivative checks.
    pub fn tiny(latent_dim: usize, label_dim: usize) -> Self {
        Architecture {
            latent_dim,
            label_dim,
            base_channels: 2,
            n_blocks: 1,
            kernel: 3,
            leaky_slope: 0.2,
            geometry: GridGeometry {
                nx: 16,
                ny: 16,
                nz: 4,
                dx: 50.0,
                dy: 50.0,
                dz: 0.5,
            },
        }
    }

    fn seed_extents(&self) -> Result<[usize; 3]> {
        let f = 1usize << self.n_blocks;
        let g = self.geometry;
        if g.nz % f != 0 || g.ny % f != 0 || g.nx % f != 0 {
            return Err(Error::invalid(format!(
                "extents {}x{}x{} not divisible by 2^{}",
                g.nx, g.ny, g.nz, self.n_blocks
            )));
        }
        Ok([g.nz / f, g.ny / f, g.nx / f])
    }

    /// Expected `(name, shape)` of every parameter tensor, in order.
    pub fn layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        if self.latent_dim == 0 || self.base_channels == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid("architecture needs latent_dim >= 1, channels >= 1, odd kernel"));
        }
        let [sz, sy, sx] = self.seed_extents()?;
        let c = self.base_channels;
        let k = self.kernel;
        let mut l = vec![
            ("dense.weight".to_string(), vec![c * sz * sy * sx, self.latent_dim + self.label_dim]),
            ("dense.bias".to_string(), vec![c * sz * sy * sx]),
        ];
        for b in 0..self.n_blocks {
            l.push((format!("block{b}.conv1.weight"), vec![c, c, k, k, k]));
            l.push((format!("block{b}.conv1.bias"), vec![c]));
            l.push((format!("block{b}.conv2.weight"), vec![c, c, k, k, k]));
            l.push((format!("block{b}.conv2.bias"), vec![c]));
            l.push((format!("block{b}.skip.weight"), vec![c, c, 1, 1, 1]));
            l.push((format!("block{b}.skip.bias"), vec![c]));
        }
        l.push(("head.weight".to_string(), vec![2, c, k, k, k]));
        l.push(("head.bias".to_string(), vec![2]));
        Ok(l)
    }
}

#[derive(Clone, Debug)]
pub struct NeuralGenerator {
    arch: Architecture,
    params: ParamSet,
}

impl NeuralGenerator {
    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        params.check_layout(&arch.layout()?)?;
        Ok(NeuralGenerator { arch, params })
    }

    /// He-style random initialization; values are stored at 32-bit precision.
    /// The dense bias carries unit-variance noise so that the frozen network
    /// has spatial structure independent of the latent.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let layout = arch.layout()?;
        let mut params = ParamSet::new();
        for (i, (name, shape)) in layout.iter().enumerate() {
            let mut r = rng::stream(seed, i as u64);
            let n: usize = shape.iter().product();
            let std = if name == "dense.bias" {
                1.0
            } else if name.ends_with(".bias") {
                0.0
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                (gain / fan_in as f64).sqrt()
            };
            let data = (0..n).map(|_| (std * rng::normal(&mut r)) as f32 as f64).collect();
            params.push(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        Ok(NeuralGenerator { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn to_weights(&self) -> GeneratorWeights {
        GeneratorWeights {
            spec: GeneratorSpec::Neural(self.arch.clone()),
            params: self.params.clone(),
        }
    }
}

impl Generator for NeuralGenerator {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn label_dim(&self) -> usize {
        self.arch.label_dim
    }

    fn geometry(&self) -> GridGeometry {
        self.arch.geometry
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn with_params(&self, params: ParamSet) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    fn forward(&self, tape: &mut Tape, z: Var, labels: Option<Var>, params: &[Var]) -> Result<GridVars> {
        let a = &self.arch;
        if params.len() != self.params.len() {
            return Err(Error::invalid("neural generator: parameter count mismatch"));
        }
        let p = |name: &str| params[self.params.position(name).expect("layout checked")];
        let input = match (a.label_dim, labels) {
            (0, _) => z,
            (k, Some(l)) => {
                if tape.shape(l) != [k] {
                    return Err(Error::Shape {
                        op: "neural labels",
                        lhs: vec![k],
                        rhs: tape.shape(l).to_vec(),
                    });
                }
                tape.concat(z, l, 0)?
            }
            (k, None) => {
                let l = tape.constant(Tensor::full(vec![k], 0.5));
                tape.concat(z, l, 0)?
            }
        };
        let slope = a.leaky_slope;
        let [sz, sy, sx] = a.seed_extents()?;
        let c = a.base_channels;
        let h = tape.dense(p("dense.weight"), input, Some(p("dense.bias")))?;
        let h = tape.leaky_relu(h, slope);
        let mut h = tape.reshape(h, &[c, sz, sy, sx])?;
        for b in 0..a.n_blocks {
            let up = tape.upsample2(h)?;
            let m = tape.conv3d(up, p(&format!("block{b}.conv1.weight")), Some(p(&format!("block{b}.conv1.bias"))))?;
            let m = tape.leaky_relu(m, slope);
            let m = tape.conv3d(m, p(&format!("block{b}.conv2.weight")), Some(p(&format!("block{b}.conv2.bias"))))?;
            let s = tape.conv3d(up, p(&format!("block{b}.skip.weight")), Some(p(&format!("block{b}.skip.bias"))))?;
            let sum = tape.add(m, s)?;
            h = tape.leaky_relu(sum, slope);
        }
        let out = tape.conv3d(h, p("head.weight"), Some(p("head.bias")))?;
        let out = tape.tanh(out);
        let out = tape.affine(out, 0.5, 0.5);
        let g = a.geometry;
        let coarse = tape.slice(out, 0, 0, 1)?;
        let coarse = tape.reshape(coarse, &[g.nz, g.ny, g.nx])?;
        let depo = tape.slice(out, 0, 1, 1)?;
        let depo = tape.reshape(depo, &[g.nz, g.ny, g.nx])?;
        Ok(GridVars { coarse, depo })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{sample_prior, LatentVector};

    #[test]
    fn output_extents_and_range() {
        let g = NeuralGenerator::random(Architecture::desk(), 1).unwrap();
        for z in sample_prior(3, 16, 2).unwrap() {
            let grid = g.generate(&z, None).unwrap();
            assert_eq!(grid.coarse_fraction.shape(), &[8, 32, 32]);
            assert!(grid.coarse_fraction.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(grid.depo_time.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic() {
        let g = NeuralGenerator::random(Architecture::desk(), 1).unwrap();
        let z = LatentVector(vec![0.1; 16]);
        let a = g.generate(&z, None).unwrap();
        let b = g.generate(&z, None).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.coarse_fraction), bits(&b.coarse_fraction));
        assert_eq!(bits(&a.depo_time), bits(&b.depo_time));
    }

    #[test]
    fn descriptor_mismatch_names_tensor() {
        let g = NeuralGenerator::random(Architecture::tiny(8, 0), 1).unwrap();
        let mut arch = Architecture::tiny(8, 0);
        arch.base_channels = 3;
        let err = NeuralGenerator::from_params(arch, g.params().clone()).unwrap_err();
        assert!(err.to_string().contains("dense.weight"), "{err}");
    }

    #[test]
    fn labels_change_output() {
        let g = NeuralGenerator::random(Architecture::tiny(8, 5), 1).unwrap();
        let z = LatentVector(vec![0.0; 8]);
        let mut l = crate::generator::LabelVector::neutral(5);
        let a = g.generate(&z, Some(&l)).unwrap();
        l.values[0] = 1.0;
        let b = g.generate(&z, Some(&l)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn indivisible_extents_rejected() {
        let mut arch = Architecture::desk();
        arch.geometry.nz = 6;
        assert!(NeuralGenerator::random(arch, 0).is_err());
    }
}
