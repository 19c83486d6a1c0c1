//! Variational inference with a normalizing flow over the latent space.
//!
//! The flow maps base noise `ε ~ N(0, I)` to `z` through an elementwise
//! affine layer followed by affine coupling layers with alternating half
//! masks. Each coupling transforms one half as `x·exp(s) + t`, where `s` and
//! `t` come from a small dense conditioner of the other half (one tanh hidden
//! layer plus a linear skip). Scales are soft-clamped to `±s_max` so the
//! map stays invertible. The evidence lower bound is maximized by
//! reparameterized Monte Carlo through the generator and forward models.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fingerprint_hex, well_mae, Adam, DataLoss, DataLossConfig, InversionResult, Metric, Observations};
use super::{SampleResult, SampleStatus, TermWeights};
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentVector, ParamSet};
use crate::rng;
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Gaussian observation model of the variational posterior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Likelihood {
    pub wells: bool,
    pub seismic: bool,
    /// Observation-noise standard deviation of well data (fraction units).
    pub well_sigma: f64,
    /// Observation-noise standard deviation of seismic amplitudes.
    pub seismic_sigma: f64,
}

impl Default for Likelihood {
    fn default() -> Self {
        Likelihood {
            wells: true,
            seismic: false,
            well_sigma: 0.025,
            seismic_sigma: 0.005,
        }
    }
}

impl Likelihood {
    /// No data: the posterior equals the prior.
    pub fn none() -> Self {
        Likelihood {
            wells: false,
            seismic: false,
            ..Likelihood::default()
        }
    }

    fn active(&self) -> bool {
        self.wells || self.seismic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_couplings: usize,
    pub hidden: usize,
    /// Soft bound on coupling log-scales.
    pub s_max: f64,
    pub steps: usize,
    /// Monte Carlo samples per ELBO estimate.
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (exponential decay); constant
    /// when absent.
    pub lr_final: Option<f64>,
    /// Posterior draws returned after training.
    pub n_samples: usize,
    pub likelihood: Likelihood,
    pub precision: Precision,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_couplings: 4,
            hidden: 16,
            s_max: 3.0,
            steps: 2000,
            batch: 8,
            lr: 0.01,
            lr_final: None,
            n_samples: 300,
            likelihood: Likelihood::default(),
            precision: Precision::F64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_samples == 0 || self.hidden == 0 {
            return Err(Error::invalid("flow batch, hidden size and sample count must be >= 1"));
        }
        if !(self.s_max > 0.0) || !(self.lr > 0.0) || self.lr_final.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::invalid("flow s_max and learning rates must be > 0"));
        }
        let l = &self.likelihood;
        if !(l.well_sigma > 0.0 && l.seismic_sigma > 0.0) {
            return Err(Error::invalid("observation-noise sigmas must be > 0"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.steps > 1 => self.lr * (end / self.lr).powf(step as f64 / (self.steps - 1) as f64),
            _ => self.lr,
        }
    }
}

/// Stack of invertible layers over `R^d` with a standard-normal base.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    n_couplings: usize,
    s_max: f64,
    params: ParamSet,
}

const PER_COUPLING: usize = 8;

impl FlowModel {
    /// A flow that is exactly the identity map: output layers of every
    /// conditioner are zero, hidden weights small and random.
    pub fn identity(dim: usize, n_couplings: usize, hidden: usize, s_max: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be >= 1"));
        }
        let n_couplings = if dim < 2 { 0 } else { n_couplings };
        let mut params = ParamSet::new();
        params.push("loc", Tensor::zeros(vec![dim]));
        params.push("log_scale", Tensor::zeros(vec![dim]));
        let mut r = rng::stream(rng::derive(seed, "flow/init", 0), 0);
        for k in 0..n_couplings {
            let (c, t) = halves(dim, k);
            let (m, n) = (c.len(), t.len());
            let std = 1.0 / (m as f64).sqrt();
            params.push(format!("c{k}.w1"), Tensor::from_fn(vec![hidden, m], |_| std * rng::normal(&mut r)));
            params.push(format!("c{k}.b1"), Tensor::zeros(vec![hidden]));
            for head in ["s", "t"] {
                params.push(format!("c{k}.w{head}"), Tensor::zeros(vec![n, hidden]));
                params.push(format!("c{k}.v{head}"), Tensor::zeros(vec![n, m]));
                params.push(format!("c{k}.b{head}"), Tensor::zeros(vec![n]));
            }
        }
        Ok(FlowModel {
            dim,
            n_couplings,
            s_max,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Records `z = f(ε)` and `log|det ∂f/∂ε|` on `tape`.
    pub fn record(&self, tape: &mut Tape, pv: &[Var], eps: Var) -> Result<(Var, Var)> {
        let e = tape.exp(pv[1]);
        let m = tape.mul(e, eps)?;
        let mut x = tape.add(m, pv[0])?;
        let mut logdet = tape.sum(pv[1]);
        for k in 0..self.n_couplings {
            let p = &pv[2 + PER_COUPLING * k..2 + PER_COUPLING * (k + 1)];
            let (c, t) = halves(self.dim, k);
            let cond = tape.slice(x, 0, c.start, c.len())?;
            let trans = tape.slice(x, 0, t.start, t.len())?;
            let h = tape.dense(p[0], cond, Some(p[1]))?;
            let h = tape.tanh(h);
            let head = |tape: &mut Tape, w: Var, v: Var, b: Var| -> Result<Var> {
                let a = tape.dense(w, h, Some(b))?;
                let skip = tape.dense(v, cond, None)?;
                tape.add(a, skip)
            };
            let raw_s = head(tape, p[2], p[3], p[4])?;
            let shift = head(tape, p[5], p[6], p[7])?;
            let s = tape.scale(raw_s, 1.0 / self.s_max);
            let s = tape.tanh(s);
            let s = tape.scale(s, self.s_max);
            let es = tape.exp(s);
            let y = tape.mul(trans, es)?;
            let y = tape.add(y, shift)?;
            let ls = tape.sum(s);
            logdet = tape.add(logdet, ls)?;
            x = if c.start == 0 { tape.concat(cond, y, 0)? } else { tape.concat(y, cond, 0)? };
        }
        Ok((x, logdet))
    }

    /// `(s, t, max |raw s| / s_max)` of coupling `k`.
    fn conditioner(&self, k: usize, cond: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let p = |s: &str| self.params.get(&format!("c{k}.{s}")).expect("flow layout");
        let (w1, b1) = (p("w1"), p("b1"));
        let hidden = b1.numel();
        let h: Vec<f64> = (0..hidden)
            .map(|i| (matvec_row(w1, i, cond) + b1.data()[i]).tanh())
            .collect();
        let head = |w: &Tensor, v: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..b.numel())
                .map(|i| matvec_row(w, i, &h) + matvec_row(v, i, cond) + b.data()[i])
                .collect()
        };
        let raw = head(p("ws"), p("vs"), p("bs"));
        let ratio = raw.iter().fold(0.0, |a: f64, r| a.max(r.abs())) / self.s_max;
        let s = raw.into_iter().map(|r| self.s_max * (r / self.s_max).tanh()).collect();
        (s, head(p("wt"), p("vt"), p("bt")), ratio)
    }

    /// `(z, log|det ∂z/∂ε|)` for one base draw.
    pub fn forward(&self, eps: &[f64]) -> (Vec<f64>, f64) {
        let loc = self.params.get("loc").expect("flow layout").data();
        let ls = self.params.get("log_scale").expect("flow layout").data();
        let mut x: Vec<f64> = (0..self.dim).map(|i| loc[i] + ls[i].exp() * eps[i]).collect();
        let mut logdet: f64 = ls.iter().sum();
        for k in 0..self.n_couplings {
            let (c, t) = halves(self.dim, k);
            let (s, shift, _) = self.conditioner(k, &x[c.clone()]);
            for (j, i) in t.enumerate() {
                x[i] = x[i] * s[j].exp() + shift[j];
            }
            logdet += s.iter().sum::<f64>();
        }
        (x, logdet)
    }

    /// Exact inverse of [`FlowModel::forward`].
    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for k in (0..self.n_couplings).rev() {
            let (c, t) = halves(self.dim, k);
            let (s, shift, _) = self.conditioner(k, &x[c.clone()]);
            for (j, i) in t.enumerate() {
                x[i] = (x[i] - shift[j]) * (-s[j]).exp();
            }
        }
        let loc = self.params.get("loc").expect("flow layout").data();
        let ls = self.params.get("log_scale").expect("flow layout").data();
        (0..self.dim).map(|i| (x[i] - loc[i]) * (-ls[i]).exp()).collect()
    }

    /// Log-density of the flow distribution at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let eps = self.inverse(z);
        let (_, logdet) = self.forward(&eps);
        std_normal_logpdf(&eps) - logdet
    }

    /// `n` draws; draw `i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<LatentVector> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(rng::derive(seed, "flow/sample", i as u64), 0);
                LatentVector(self.forward(&rng::normals(&mut r, self.dim)).0)
            })
            .collect()
    }

    /// Largest `|raw s| / s_max` over the couplings at one base draw; values
    /// above 1 mean the soft clamp is active.
    fn clamp_ratio(&self, eps: &[f64]) -> f64 {
        let loc = self.params.get("loc").expect("flow layout").data();
        let ls = self.params.get("log_scale").expect("flow layout").data();
        let mut x: Vec<f64> = (0..self.dim).map(|i| loc[i] + ls[i].exp() * eps[i]).collect();
        let mut worst: f64 = 0.0;
        for k in 0..self.n_couplings {
            let (c, t) = halves(self.dim, k);
            let (s, shift, ratio) = self.conditioner(k, &x[c.clone()]);
            worst = worst.max(ratio);
            for (j, i) in t.enumerate() {
                x[i] = x[i] * s[j].exp() + shift[j];
            }
        }
        worst
    }
}

fn matvec_row(w: &Tensor, row: usize, x: &[f64]) -> f64 {
    let n = x.len();
    w.data()[row * n..(row + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `(conditioning, transformed)` index ranges of coupling `k`.
fn halves(d: usize, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let h = d / 2;
    if k % 2 == 0 {
        (0..h, h..d)
    } else {
        (h..d, 0..h)
    }
}

fn std_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

/// Trained flow, its ELBO trace and posterior draws.
#[derive(Clone, Debug)]
pub struct VariationalOutcome {
    pub flow: FlowModel,
    /// Monte Carlo ELBO estimate at every step.
    pub elbo_history: Vec<f64>,
    pub result: InversionResult,
}

/// Gaussian log-likelihood as a negated weighted squared-error loss plus a
/// constant: `−Σ r²/(2σ²) − n·ln(σ√(2π))`.
struct GaussianTerms {
    loss: DataLoss,
    constant: f64,
}

fn gaussian_terms(obs: &Observations, lik: &Likelihood) -> Result<Option<GaussianTerms>> {
    if !lik.active() {
        return Ok(None);
    }
    let n_well = if lik.wells { obs.wells.n_obs() as f64 } else { 0.0 };
    let n_seis = match (&obs.seismic, lik.seismic) {
        (Some(s), true) => s.cube.amplitudes.numel() as f64,
        _ => 0.0,
    };
    let cfg = DataLossConfig {
        wells: lik.wells,
        seismic: lik.seismic,
        weights: TermWeights::Fixed {
            well: n_well / (2.0 * lik.well_sigma.powi(2)),
            seismic: n_seis / (2.0 * lik.seismic_sigma.powi(2)),
        },
        well_metric: Metric::Squared,
        seismic_metric: Metric::Squared,
        lambda_z: 0.0,
    };
    let norm = |n: f64, s: f64| n * (s * (2.0 * PI).sqrt()).ln();
    Ok(Some(GaussianTerms {
        loss: DataLoss::new(obs, &cfg)?,
        constant: -norm(n_well, lik.well_sigma) - norm(n_seis, lik.seismic_sigma),
    }))
}

/// Fits a flow posterior `q(z)` by maximizing the ELBO
/// `E_q[log p(data|z) + log p(z) − log q(z)]`, then draws `n_samples` from it.
pub fn variational_infer<G: Generator>(
    gen: &G,
    obs: &Observations,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<VariationalOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let d = gen.latent_dim();
    let before = gen.params().fingerprint();
    let lik = gaussian_terms(obs, &cfg.likelihood)?;
    let mut flow = FlowModel::identity(d, cfg.n_couplings, cfg.hidden, cfg.s_max, seed)?;
    let sizes: Vec<usize> = flow.params.tensors().map(Tensor::numel).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut elbo_history = Vec::with_capacity(cfg.steps);
    let mut warned = false;

    for step in 0..cfg.steps {
        let mut tape = Tape::new(cfg.precision);
        let pv: Vec<Var> = flow.params.tensors().map(|t| tape.input(t.clone())).collect();
        let gp = gen.param_vars(&mut tape, false);
        let mut total: Option<Var> = None;
        for b in 0..cfg.batch {
            let mut r = rng::stream(rng::derive(seed, "flow/eps", step as u64), b as u64);
            let eps = rng::normals(&mut r, d);
            let log_base = std_normal_logpdf(&eps);
            let ev = tape.constant(Tensor::from_vec(eps));
            let (z, logdet) = flow.record(&mut tape, &pv, ev)?;
            // log p(z) − log q(z) = log N(z) − log N(ε) + logdet
            let zz = tape.square(z);
            let zz = tape.sum(zz);
            let lp = tape.affine(zz, -0.5, -0.5 * d as f64 * (2.0 * PI).ln() - log_base);
            let mut elbo = tape.add(lp, logdet)?;
            if let Some(g) = &lik {
                let out = gen.forward(&mut tape, z, None, &gp)?;
                let l = g.loss.record(&mut tape, out, None)?;
                let ll = tape.affine(l.total, -1.0, g.constant);
                elbo = tape.add(elbo, ll)?;
            }
            total = Some(match total {
                None => elbo,
                Some(t) => tape.add(t, elbo)?,
            });
        }
        let total = total.expect("batch >= 1");
        let mean_elbo = tape.value(total).item() / cfg.batch as f64;
        if !mean_elbo.is_finite() {
            return Err(Error::numerical(
                "variational inference",
                format!("ELBO became non-finite at step {step}"),
            ));
        }
        elbo_history.push(mean_elbo);
        let g = tape.backward(total, &Tensor::scalar(-1.0 / cfg.batch as f64))?;
        let grads: Vec<Vec<f64>> = pv.iter().map(|v| g.wrt(*v).into_data()).collect();
        adam.lr = cfg.lr_at(step);
        let mut blocks: Vec<&mut [f64]> = flow.params.tensors_mut().map(Tensor::data_mut).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut blocks, &grad_refs);
        if !warned && flow.clamp_ratio(&vec![0.0; d]) > 1.0 {
            log::warn!("variational inference: coupling scales clamped to ±{}", cfg.s_max);
            warned = true;
        }
    }
    assert_eq!(before, gen.params().fingerprint(), "variational inference must not modify generator weights");

    let draws = flow.sample(cfg.n_samples, seed);
    let samples = draws
        .iter()
        .map(|z| {
            let err = well_mae(gen, &obs.wells, z, None)?;
            Ok(SampleResult {
                latent: z.0.clone(),
                labels: None,
                history: vec![],
                inversion_error: err,
                status: SampleStatus::Converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalOutcome {
        flow,
        elbo_history,
        result: InversionResult {
            method: "variational".into(),
            seed,
            samples,
            weights_fingerprint: fingerprint_hex(before),
            wall_clock_s: clock.elapsed().as_secs_f64(),
        },
    })
}
