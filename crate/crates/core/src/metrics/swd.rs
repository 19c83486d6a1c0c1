//! Multi-scale sliced Wasserstein distance between two sets of grids.
//!
//! Each horizontal slice is decomposed into a Laplacian pyramid. At every
//! level, square patches are sampled, normalized with statistics pooled over
//! both sets, projected onto random unit directions, and compared with the
//! exact one-dimensional Wasserstein distance along each direction.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ModelGrid;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    #[default]
    CoarseFraction,
    DepoTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwdConfig {
    pub levels: usize,
    /// Patch side length (cells) on horizontal slices.
    pub patch: usize,
    pub patches_per_sample: usize,
    pub projections: usize,
    pub repetitions: usize,
    pub property: Property,
}

impl Default for SwdConfig {
    fn default() -> Self {
        SwdConfig {
            levels: 3,
            patch: 7,
            patches_per_sample: 64,
            projections: 128,
            repetitions: 4,
            property: Property::CoarseFraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwdResult {
    pub distance: f64,
    pub per_level: Vec<f64>,
}

/// One pyramid level, row-major `[ny, nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<f64>,
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur(img: &PyramidLevel, gain: f64) -> PyramidLevel {
    let (ny, nx) = (img.ny, img.nx);
    let mut tmp = vec![0.0; ny * nx];
    for y in 0..ny {
        for x in 0..nx {
            tmp[y * nx + x] = BINOMIAL
                .iter()
                .enumerate()
                .map(|(k, w)| w * img.data[y * nx + reflect(x as isize + k as isize - 2, nx)])
                .sum();
        }
    }
    let mut out = vec![0.0; ny * nx];
    for y in 0..ny {
        for x in 0..nx {
            out[y * nx + x] = gain
                * BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - 2, ny) * nx + x])
                    .sum::<f64>();
        }
    }
    PyramidLevel { ny, nx, data: out }
}

fn downsample(img: &PyramidLevel) -> PyramidLevel {
    let b = blur(img, 1.0);
    let (ny, nx) = (img.ny.div_ceil(2), img.nx.div_ceil(2));
    let data = (0..ny * nx).map(|k| b.data[(2 * (k / nx)) * img.nx + 2 * (k % nx)]).collect();
    PyramidLevel { ny, nx, data }
}

fn upsample(img: &PyramidLevel, ny: usize, nx: usize) -> PyramidLevel {
    let mut z = PyramidLevel {
        ny,
        nx,
        data: vec![0.0; ny * nx],
    };
    for y in 0..img.ny {
        for x in 0..img.nx {
            if 2 * y < ny && 2 * x < nx {
                z.data[2 * y * nx + 2 * x] = img.data[y * img.nx + x];
            }
        }
    }
    blur(&z, 4.0)
}

/// Band-pass levels `0..levels−1` followed by the low-pass residual.
pub fn laplacian_pyramid(slice: &[f64], ny: usize, nx: usize, levels: usize) -> Result<Vec<PyramidLevel>> {
    if slice.len() != ny * nx || ny == 0 || nx == 0 || levels == 0 {
        return Err(Error::invalid("pyramid needs a non-empty slice and at least one level"));
    }
    let mut g = PyramidLevel {
        ny,
        nx,
        data: slice.to_vec(),
    };
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels - 1 {
        let next = downsample(&g);
        let up = upsample(&next, g.ny, g.nx);
        let band = g.data.iter().zip(&up.data).map(|(a, b)| a - b).collect();
        out.push(PyramidLevel {
            ny: g.ny,
            nx: g.nx,
            data: band,
        });
        g = next;
    }
    out.push(g);
    Ok(out)
}

/// Inverse of [`laplacian_pyramid`]: upsample-and-add from the coarsest level.
pub fn pyramid_collapse(levels: &[PyramidLevel]) -> Vec<f64> {
    let mut acc = levels.last().expect("non-empty pyramid").clone();
    for band in levels[..levels.len() - 1].iter().rev() {
        let up = upsample(&acc, band.ny, band.nx);
        acc = PyramidLevel {
            ny: band.ny,
            nx: band.nx,
            data: band.data.iter().zip(&up.data).map(|(a, b)| a + b).collect(),
        };
    }
    acc.data
}

/// Exact 1-Wasserstein distance between two empirical distributions,
/// `∫|F_A − F_B|`. For equal sizes this is the mean absolute difference of
/// the sorted values.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Mean over `n_proj` random unit directions of the 1-Wasserstein distance
/// between the projected descriptor sets. Directions depend only on `seed`.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() || n_proj == 0 {
        return Err(Error::invalid("sliced Wasserstein needs descriptors and projections"));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::invalid("descriptors must share one non-zero dimension"));
    }
    let mut r = rng::stream(seed, 0);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut u = rng::normals(&mut r, dim);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let proj = |set: &[Vec<f64>]| -> Vec<f64> { set.iter().map(|d| d.iter().zip(&u).map(|(x, w)| x * w).sum()).collect() };
        total += wasserstein1(&proj(a), &proj(b));
    }
    Ok(total / n_proj as f64)
}

fn channel(g: &ModelGrid, p: Property) -> &[f64] {
    match p {
        Property::CoarseFraction => g.coarse_fraction.data(),
        Property::DepoTime => g.depo_time.data(),
    }
}

/// Pyramids of every horizontal slice: `[slice][level]`.
fn pyramids(g: &ModelGrid, cfg: &SwdConfig) -> Result<Vec<Vec<PyramidLevel>>> {
    let geo = g.geometry;
    let plane = geo.nx * geo.ny;
    let data = channel(g, cfg.property);
    (0..geo.nz)
        .map(|iz| laplacian_pyramid(&data[iz * plane..(iz + 1) * plane], geo.ny, geo.nx, cfg.levels))
        .collect()
}

fn patches(pyr: &[Vec<PyramidLevel>], level: usize, cfg: &SwdConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    let p = cfg.patch;
    (0..cfg.patches_per_sample)
        .map(|_| {
            let img = &pyr[r.gen_range(0..pyr.len())][level];
            let y0 = r.gen_range(0..=img.ny - p);
            let x0 = r.gen_range(0..=img.nx - p);
            (0..p * p).map(|k| img.data[(y0 + k / p) * img.nx + x0 + k % p]).collect()
        })
        .collect()
}

/// Largest pyramid depth whose every level still holds a `patch`-sized window.
fn max_levels(ny: usize, nx: usize, patch: usize) -> usize {
    let (mut ny, mut nx, mut l) = (ny, nx, 0);
    while ny >= patch && nx >= patch {
        l += 1;
        ny = ny.div_ceil(2);
        nx = nx.div_ceil(2);
        if l > 64 {
            break;
        }
    }
    l
}

/// Multi-scale sliced Wasserstein distance between two sets of grids.
/// Patch positions depend only on `(seed, level, repetition, sample index)`,
/// so identical sets give exactly zero and swapping the sets leaves the
/// value unchanged.
pub fn swd_multiscale(a: &[ModelGrid], b: &[ModelGrid], cfg: &SwdConfig, seed: u64) -> Result<SwdResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("SWD needs two non-empty sets"));
    }
    if cfg.levels == 0 || cfg.patch == 0 || cfg.patches_per_sample == 0 || cfg.projections == 0 || cfg.repetitions == 0 {
        return Err(Error::invalid("SWD configuration values must be >= 1"));
    }
    let geo = a[0].geometry;
    if a.iter().chain(b).any(|g| g.geometry != geo) {
        return Err(Error::invalid("SWD sets must share one geometry"));
    }
    let feasible = max_levels(geo.ny, geo.nx, cfg.patch);
    if cfg.levels > feasible {
        return Err(Error::invalid(format!(
            "{}×{} slices support at most {feasible} pyramid levels with {}×{} patches (requested {})",
            geo.ny, geo.nx, cfg.patch, cfg.patch, cfg.levels
        )));
    }
    let pa = a.iter().map(|g| pyramids(g, cfg)).collect::<Result<Vec<_>>>()?;
    let pb = b.iter().map(|g| pyramids(g, cfg)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.levels).flat_map(|l| (0..cfg.repetitions).map(move |r| (l, r))).collect();
    let values = jobs
        .par_iter()
        .map(|&(l, rep)| {
            let key = (l * cfg.repetitions + rep) as u64;
            let collect = |set: &[Vec<Vec<PyramidLevel>>]| -> Vec<Vec<f64>> {
                set.iter()
                    .enumerate()
                    .flat_map(|(i, p)| patches(p, l, cfg, rng::derive(rng::derive(seed, "swd/patches", key), "swd/sample", i as u64)))
                    .collect()
            };
            let (mut da, mut db) = (collect(&pa), collect(&pb));
            let all = da.iter().chain(&db).flatten();
            let n = (da.len() + db.len()) as f64 * (cfg.patch * cfg.patch) as f64;
            let mean = all.clone().sum::<f64>() / n;
            let var = all.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for d in da.iter_mut().chain(db.iter_mut()) {
                d.iter_mut().for_each(|v| *v = (*v - mean) / std);
            }
            sliced_wasserstein(&da, &db, cfg.projections, rng::derive(seed, "swd/projections", key))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_level: Vec<f64> = values
        .chunks(cfg.repetitions)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(SwdResult {
        distance: per_level.iter().sum::<f64>() / per_level.len() as f64,
        per_level,
    })
}
