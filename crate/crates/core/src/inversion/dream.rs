//! DREAM_(ZS): differential-evolution adaptive Metropolis sampling with an
//! archive of past states (ter Braak & Vrugt 2008; Laloy & Vrugt 2012).
//!
//! Chains advance in lockstep generations. Each proposal is either a
//! parallel-direction move built from `δ` pairs of archive states on a
//! random crossover subspace, or (with small probability) a snooker move
//! along the line through the current state and an archive state. The
//! archive grows with the current chain states every few generations.
//! During burn-in, chains whose recent mean log-density is an outlier are
//! reset to the best chain.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamConfig {
    pub n_chains: usize,
    /// Burn-in generations.
    pub burn_in: usize,
    /// Generations after burn-in.
    pub samples: usize,
    /// Largest number of archive pairs per parallel-direction move.
    pub delta_max: usize,
    pub crossover: Vec<f64>,
    pub snooker_probability: f64,
    /// Every this many generations the jump rate is 1 (mode jumping).
    pub jump_every: usize,
    /// Chain states are appended to the archive every this many generations.
    pub archive_every: usize,
    /// Initial archive size; `10·d` when absent.
    pub archive_init: Option<usize>,
    /// Standard deviation of the initial (normal) archive draws.
    pub init_scale: f64,
    /// Half-width of the uniform jump-rate randomization.
    pub b: f64,
    /// Standard deviation of the additive Gaussian jitter.
    pub b_star: f64,
    /// Outlier-chain check interval during burn-in.
    pub outlier_every: usize,
    /// Store every this many generations.
    pub record_every: usize,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            n_chains: 10,
            burn_in: 20_000,
            samples: 20_000,
            delta_max: 3,
            crossover: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            snooker_probability: 0.1,
            jump_every: 5,
            archive_every: 10,
            archive_init: None,
            init_scale: 1.0,
            b: 0.05,
            b_star: 1e-6,
            outlier_every: 1000,
            record_every: 1,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_chains < 3 {
            return Err(Error::invalid(format!("need ≥ 3 chains, got {}", self.n_chains)));
        }
        if d == 0 {
            return Err(Error::invalid("dimension must be >= 1"));
        }
        if self.delta_max == 0 || self.crossover.is_empty() || self.crossover.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(Error::invalid("delta_max must be >= 1 and crossover values in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.snooker_probability) {
            return Err(Error::invalid("snooker probability must lie in [0, 1]"));
        }
        if self.jump_every == 0 || self.archive_every == 0 || self.outlier_every == 0 || self.record_every == 0 {
            return Err(Error::invalid("DREAM intervals must be >= 1"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("DREAM needs at least one sampling generation"));
        }
        let m0 = self.archive_size(d);
        if m0 < 2 * self.delta_max + 1 || m0 < 3 {
            return Err(Error::invalid(format!(
                "archive of {m0} states is smaller than 2·delta_max + 1 = {}",
                2 * self.delta_max + 1
            )));
        }
        Ok(())
    }

    fn archive_size(&self, d: usize) -> usize {
        self.archive_init.unwrap_or(10 * d)
    }
}

/// Chains, their log-densities and the final archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEnsemble {
    pub dim: usize,
    /// `states[chain][step]` is a `dim`-vector; steps are recorded generations.
    pub states: Vec<Vec<Vec<f64>>>,
    pub log_density: Vec<Vec<f64>>,
    /// Number of recorded steps belonging to burn-in.
    pub burn_in: usize,
    pub archive: Vec<Vec<f64>>,
    /// Fraction of accepted proposals after burn-in.
    pub acceptance_rate: f64,
    /// Outlier chains reset during burn-in.
    pub resets: usize,
}

impl ChainEnsemble {
    pub fn n_chains(&self) -> usize {
        self.states.len()
    }

    /// Post-burn-in states of one chain.
    pub fn post_burn_in(&self, chain: usize) -> &[Vec<f64>] {
        &self.states[chain][self.burn_in..]
    }

    /// Post-burn-in states of all chains, chain by chain.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        (0..self.n_chains()).flat_map(|c| self.post_burn_in(c).to_vec()).collect()
    }
}

/// `min(1, exp(Δ))`; non-finite or NaN `Δ` gives 0 except `+∞`.
pub fn accept_probability(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Metropolis decision for a uniform draw `u ∈ [0, 1)`.
pub fn metropolis_accept(log_ratio: f64, u: f64) -> bool {
    u < accept_probability(log_ratio)
}

/// Parallel-direction proposal
/// `z'_j = z_j + (1 + e_j)·γ·(Σ_{r1} a_j − Σ_{r2} a_j) + ε_j` for `j ∈ dims`.
/// With `ε = 0`, swapping `r1` and `r2` exactly reverses the move.
#[allow(clippy::too_many_arguments)]
pub fn parallel_direction_jump(
    z: &[f64],
    archive: &[Vec<f64>],
    r1: &[usize],
    r2: &[usize],
    dims: &[usize],
    gamma: f64,
    e: &[f64],
    eps: &[f64],
) -> Vec<f64> {
    let mut out = z.to_vec();
    for &j in dims {
        let diff: f64 = r1.iter().map(|&a| archive[a][j]).sum::<f64>() - r2.iter().map(|&b| archive[b][j]).sum::<f64>();
        out[j] = z[j] + (1.0 + e[j]) * gamma * diff + eps[j];
    }
    out
}

struct Proposal {
    state: Vec<f64>,
    /// Additive log correction of the acceptance ratio.
    log_correction: f64,
}

fn propose(z: &[f64], archive: &[Vec<f64>], cfg: &DreamConfig, generation: usize, r: &mut rng::Rng) -> Option<Proposal> {
    let d = z.len();
    if r.gen::<f64>() < cfg.snooker_probability {
        let idx = sample(r, archive.len(), 3).into_vec();
        let (za, zb, zc) = (&archive[idx[0]], &archive[idx[1]], &archive[idx[2]]);
        let dir: Vec<f64> = z.iter().zip(za).map(|(a, b)| a - b).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return None;
        }
        let u: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let proj: f64 = zb.iter().zip(zc).zip(&u).map(|((b, c), u)| (b - c) * u).sum();
        let gamma = r.gen_range(1.2..2.2);
        let state: Vec<f64> = z.iter().zip(&u).map(|(v, u)| v + gamma * proj * u).collect();
        let new_norm = state.iter().zip(za).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if !(new_norm > 0.0) {
            return None;
        }
        let log_correction = (d as f64 - 1.0) * (new_norm.ln() - norm.ln());
        return Some(Proposal { state, log_correction });
    }
    let delta = r.gen_range(1..=cfg.delta_max);
    let idx = sample(r, archive.len(), 2 * delta).into_vec();
    let (r1, r2) = idx.split_at(delta);
    let cr = cfg.crossover[r.gen_range(0..cfg.crossover.len())];
    let mut dims: Vec<usize> = (0..d).filter(|_| r.gen::<f64>() < cr).collect();
    if dims.is_empty() {
        dims.push(r.gen_range(0..d));
    }
    let gamma = if (generation + 1) % cfg.jump_every == 0 {
        1.0
    } else {
        2.38 / ((2 * delta * dims.len()) as f64).sqrt()
    };
    let e: Vec<f64> = (0..d).map(|_| r.gen_range(-cfg.b..=cfg.b)).collect();
    let eps: Vec<f64> = (0..d).map(|_| cfg.b_star * rng::normal(r)).collect();
    Some(Proposal {
        state: parallel_direction_jump(z, archive, r1, r2, &dims, gamma, &e, &eps),
        log_correction: 0.0,
    })
}

fn quartiles(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (s.len() - 1) as f64;
        let (i, f) = (x.floor() as usize, x.fract());
        if i + 1 < s.len() {
            s[i] + f * (s[i + 1] - s[i])
        } else {
            s[i]
        }
    };
    (q(0.25), q(0.75))
}

struct Chain {
    z: Vec<f64>,
    lp: f64,
    accepted: usize,
}

/// Samples `exp(log_density)` over `R^d`. Randomness is keyed by
/// `(seed, chain, generation)`, so results do not depend on the worker count.
pub fn dream_zs<F>(log_density: F, d: usize, cfg: &DreamConfig, seed: u64) -> Result<ChainEnsemble>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate(d)?;
    let eval = |z: &[f64]| {
        let v = log_density(z);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let m0 = cfg.archive_size(d);
    let mut archive: Vec<Vec<f64>> = (0..m0)
        .map(|i| {
            let mut r = rng::stream(rng::derive(seed, "dream/archive", i as u64), 0);
            rng::normals(&mut r, d).into_iter().map(|v| v * cfg.init_scale).collect()
        })
        .collect();
    let mut chains: Vec<Chain> = (0..cfg.n_chains)
        .map(|c| {
            let z = archive[m0 - 1 - (c % m0)].clone();
            let lp = eval(&z);
            Chain { z, lp, accepted: 0 }
        })
        .collect();

    let total = cfg.burn_in + cfg.samples;
    let mut states: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(total / cfg.record_every + 1); cfg.n_chains];
    let mut log_density_rec: Vec<Vec<f64>> = vec![Vec::with_capacity(total / cfg.record_every + 1); cfg.n_chains];
    let mut window: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_chains];
    let mut recorded_burn_in = 0;
    let mut resets = 0;

    for generation in 0..total {
        if generation == cfg.burn_in {
            chains.iter_mut().for_each(|c| c.accepted = 0);
        }
        let snapshot = &archive;
        chains.par_iter_mut().enumerate().for_each(|(c, chain)| {
            let mut r = rng::stream(rng::derive(seed, "dream/chain", c as u64), generation as u64);
            let Some(p) = propose(&chain.z, snapshot, cfg, generation, &mut r) else {
                return;
            };
            let lp = eval(&p.state);
            let u: f64 = r.gen();
            if metropolis_accept(lp - chain.lp + p.log_correction, u) {
                chain.z = p.state;
                chain.lp = lp;
                chain.accepted += 1;
            }
        });

        if (generation + 1) % cfg.archive_every == 0 {
            archive.extend(chains.iter().map(|c| c.z.clone()));
        }

        if generation < cfg.burn_in {
            for (w, c) in window.iter_mut().zip(&chains) {
                w.push(c.lp);
            }
            if (generation + 1) % cfg.outlier_every == 0 {
                let means: Vec<f64> = window
                    .iter()
                    .map(|w| {
                        let half = &w[w.len() / 2..];
                        half.iter().sum::<f64>() / half.len() as f64
                    })
                    .collect();
                let (q1, q3) = quartiles(&means);
                let limit = q1 - 2.0 * (q3 - q1);
                let best = (0..chains.len())
                    .max_by(|&a, &b| chains[a].lp.total_cmp(&chains[b].lp))
                    .expect("at least three chains");
                let (bz, blp) = (chains[best].z.clone(), chains[best].lp);
                for (c, m) in means.iter().enumerate() {
                    if *m < limit || m.is_nan() {
                        chains[c].z = bz.clone();
                        chains[c].lp = blp;
                        resets += 1;
                    }
                }
                window.iter_mut().for_each(Vec::clear);
            }
        }

        if generation % cfg.record_every == 0 {
            for (c, chain) in chains.iter().enumerate() {
                states[c].push(chain.z.clone());
                log_density_rec[c].push(chain.lp);
            }
            if generation < cfg.burn_in {
                recorded_burn_in += 1;
            }
        }
    }
    let accepted: usize = chains.iter().map(|c| c.accepted).sum();
    Ok(ChainEnsemble {
        dim: d,
        states,
        log_density: log_density_rec,
        burn_in: recorded_burn_in,
        archive,
        acceptance_rate: accepted as f64 / (cfg.samples * cfg.n_chains) as f64,
        resets,
    })
}

/// Potential scale reduction per dimension over the given samples
/// (`chains[c][step][dim]`, equal lengths). Identical constant chains give 1;
/// zero within-chain but positive between-chain variance gives `+∞`.
pub fn gelman_rubin_samples(chains: &[&[Vec<f64>]]) -> Result<Vec<f64>> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::invalid("R-hat needs at least two chains"));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("R-hat needs chains of equal length"));
    }
    if n < 4 {
        return Err(Error::invalid(format!("R-hat needs at least 4 samples per chain, got {n}")));
    }
    let d = chains[0][0].len();
    let nf = n as f64;
    Ok((0..d)
        .map(|j| {
            let means: Vec<f64> = chains.iter().map(|c| c.iter().map(|s| s[j]).sum::<f64>() / nf).collect();
            let w = chains
                .iter()
                .zip(&means)
                .map(|(c, mu)| c.iter().map(|s| (s[j] - mu).powi(2)).sum::<f64>() / (nf - 1.0))
                .sum::<f64>()
                / m as f64;
            let grand = means.iter().sum::<f64>() / m as f64;
            let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
            if w == 0.0 {
                return if b == 0.0 { 1.0 } else { f64::INFINITY };
            }
            (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
        })
        .collect())
}

/// R̂ per dimension over the second half of the post-burn-in samples.
pub fn gelman_rubin(ens: &ChainEnsemble) -> Result<Vec<f64>> {
    let halves: Vec<&[Vec<f64>]> = (0..ens.n_chains())
        .map(|c| {
            let s = ens.post_burn_in(c);
            &s[s.len() / 2..]
        })
        .collect();
    gelman_rubin_samples(&halves)
}
