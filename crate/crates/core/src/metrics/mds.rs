//! Classical (Torgerson) multidimensional scaling and principal directions
//! of a latent cloud.

use super::linalg::symmetric_eigen;
use crate::error::{Error, Result};
use crate::generator::LatentVector;
use crate::io::format_sig;

/// Symmetric, non-negative `n × n` distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!("distance matrix needs {} entries, got {}", n * n, data.len())));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::invalid("distance matrix diagonal must be zero"));
            }
            for j in 0..n {
                let v = data[i * n + j];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::invalid(format!("distance ({i}, {j}) = {v} is not a finite non-negative value")));
                }
                if (v - data[j * n + i]).abs() > 1e-12 {
                    return Err(Error::invalid(format!("distance matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    /// Fills entries `(i, j)`, `i < j`, from `f` and mirrors them.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self::new(n, data)
    }

    /// Euclidean distances between points.
    pub fn euclidean(points: &[Vec<f64>]) -> Result<Self> {
        Self::from_fn(points.len(), |i, j| euclid(&points[i], &points[j]))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format_sig(self.get(i, j), 9)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Coordinates in `dim` dimensions whose distances approximate `d`:
/// eigenvectors of `B = −½·J·D²·J` scaled by the root of their eigenvalues.
pub fn classical_mds(d: &DistanceMatrix, dim: usize) -> Result<Vec<Vec<f64>>> {
    let n = d.len();
    if dim == 0 || n < dim + 1 {
        return Err(Error::invalid(format!("MDS into {dim} dimensions needs at least {} points", dim + 1)));
    }
    let sq: Vec<f64> = d.data.iter().map(|v| v * v).collect();
    let row_mean: Vec<f64> = (0..n).map(|i| sq[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            -0.5 * (sq[k] - row_mean[i] - row_mean[j] + grand)
        })
        .collect();
    let (values, vectors) = symmetric_eigen(&b, n)?;
    let mut coords = vec![vec![0.0; dim]; n];
    for k in 0..dim {
        let lambda = if values[k] < 0.0 {
            log::warn!("MDS: eigenvalue {k} is negative ({:.3e}); clamped to zero", values[k]);
            0.0
        } else {
            values[k]
        };
        let s = lambda.sqrt();
        for i in 0..n {
            coords[i][k] = vectors[k][i] * s;
        }
    }
    Ok(coords)
}

/// Kruskal stress-1 of an embedding against target distances.
pub fn stress(d: &DistanceMatrix, coords: &[Vec<f64>]) -> f64 {
    let n = d.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let e = euclid(&coords[i], &coords[j]) - d.get(i, j);
            num += e * e;
            den += d.get(i, j) * d.get(i, j);
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// The two leading principal directions of a latent cloud, orthonormal, each
/// signed so that its largest-magnitude component is positive.
pub fn pca_directions(latents: &[LatentVector]) -> Result<[Vec<f64>; 2]> {
    if latents.len() < 3 {
        return Err(Error::invalid("PCA needs at least 3 latent vectors"));
    }
    let d = latents[0].dim();
    if d < 2 || latents.iter().any(|z| z.dim() != d) {
        return Err(Error::invalid("PCA needs latent vectors of one common dimension >= 2"));
    }
    let n = latents.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| latents.iter().map(|z| z.0[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for z in latents {
        let c: Vec<f64> = z.0.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    if cov.iter().step_by(d + 1).all(|&v| v == 0.0) {
        return Err(Error::invalid("latent vectors have zero variance"));
    }
    let (_, mut vectors) = symmetric_eigen(&cov, d)?;
    let mut pick = |k: usize| {
        let mut v = std::mem::take(&mut vectors[k]);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let lead = v.iter().copied().fold(0.0, |a: f64, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok([pick(0), pick(1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn equilateral_triangle() {
        let d = DistanceMatrix::from_fn(3, |_, _| 1.0).unwrap();
        let c = classical_mds(&d, 2).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((euclid(&c[i], &c[j]) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_points() {
        let d = DistanceMatrix::from_fn(2, |_, _| 2.5).unwrap();
        let c = classical_mds(&d, 1).unwrap();
        assert!((euclid(&c[0], &c[1]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn planar_points_round_trip() {
        let mut r = rng::stream(3, 0);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| rng::normals(&mut r, 2)).collect();
        let d = DistanceMatrix::euclidean(&pts).unwrap();
        let c = classical_mds(&d, 2).unwrap();
        assert!(stress(&d, &c) < 1e-9);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn line_gives_its_direction() {
        let u = [0.6, -0.8, 0.0];
        let pts: Vec<LatentVector> = (0..6).map(|t| LatentVector(u.iter().map(|v| v * t as f64).collect())).collect();
        let [d1, d2] = pca_directions(&pts).unwrap();
        let cos: f64 = d1.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 1.0 - 1e-9);
        assert!(d1[1] > 0.0, "largest-magnitude component is positive");
        let dot: f64 = d1.iter().zip(&d2).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
    }

    #[test]
    fn zero_variance_rejected() {
        let pts = vec![LatentVector(vec![1.0, 2.0]); 4];
        assert!(pca_directions(&pts).is_err());
    }
}
