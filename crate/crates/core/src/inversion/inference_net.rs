//! Inference network: a fully-connected map `I: ε ↦ z` trained so that
//! generated samples `G(I(ε))` match the data for `ε ~ N(0, I)`.
//!
//! Without a regularizer the network is free to map all noise to the same
//! data-matching latent (collapse). An optional moment-matching term pulls
//! the batch mean and variance of `I(ε)` towards the prior.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fingerprint_hex, well_mae, Adam, DataLoss, DataLossConfig, InversionResult, Observations};
use super::{SampleResult, SampleStatus};
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentVector, ParamSet};
use crate::rng;
use crate::tensor::{Precision, Tape, Tensor, Var};

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetInit {
    /// He-normal weights, zero biases.
    #[default]
    Random,
    /// Identity weights (all layer sizes equal), zero biases.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceNetConfig {
    /// Auxiliary noise dimension; the latent dimension when absent.
    pub noise_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub init: NetInit,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (exponential decay); constant
    /// when absent.
    pub lr_final: Option<f64>,
    /// Weight of the moment-matching anti-collapse term.
    pub collapse_weight: f64,
    pub n_samples: usize,
    pub precision: Precision,
    pub loss: DataLossConfig,
}

impl Default for InferenceNetConfig {
    fn default() -> Self {
        InferenceNetConfig {
            noise_dim: None,
            hidden: vec![64, 64],
            init: NetInit::Random,
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            lr_final: None,
            collapse_weight: 0.0,
            n_samples: 300,
            precision: Precision::F32,
            loss: DataLossConfig::default(),
        }
    }
}

impl InferenceNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_samples == 0 || self.hidden.contains(&0) || self.noise_dim == Some(0) {
            return Err(Error::invalid("inference network sizes, batch and sample count must be >= 1"));
        }
        if !(self.lr > 0.0) || self.lr_final.is_some_and(|l| !(l > 0.0)) || !(self.collapse_weight >= 0.0) {
            return Err(Error::invalid("learning rate must be > 0 and collapse weight >= 0"));
        }
        if self.collapse_weight > 0.0 && self.batch < 2 {
            return Err(Error::invalid("moment matching needs a batch of at least 2"));
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

/// Dense network with leaky-ReLU hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet {
    sizes: Vec<usize>,
    params: ParamSet,
}

impl InferenceNet {
    /// `sizes = [noise_dim, hidden…, latent_dim]`.
    pub fn new(sizes: &[usize], init: NetInit, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("inference network needs at least input and output sizes >= 1"));
        }
        if init == NetInit::Identity && sizes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid("identity initialization needs equal layer sizes"));
        }
        let mut r = rng::stream(rng::derive(seed, "inference-net/init", 0), 0);
        let mut params = ParamSet::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weight = match init {
                NetInit::Identity => Tensor::from_fn(vec![n_out, n_in], |i| if i / n_in == i % n_in { 1.0 } else { 0.0 }),
                NetInit::Random => {
                    let std = (2.0 / n_in as f64).sqrt();
                    Tensor::from_fn(vec![n_out, n_in], |_| std * rng::normal(&mut r))
                }
            };
            params.push(format!("l{l}.w"), weight);
            params.push(format!("l{l}.b"), Tensor::zeros(vec![n_out]));
        }
        Ok(InferenceNet {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn record(&self, tape: &mut Tape, pv: &[Var], eps: Var) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        let mut x = eps;
        for l in 0..layers {
            x = tape.dense(pv[2 * l], x, Some(pv[2 * l + 1]))?;
            if l + 1 < layers {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }

    pub fn apply(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.noise_dim() {
            return Err(Error::invalid("noise dimension mismatch"));
        }
        let mut tape = Tape::new(Precision::F64);
        let pv: Vec<Var> = self.params.tensors().map(|t| tape.constant(t.clone())).collect();
        let e = tape.constant(Tensor::from_vec(eps.to_vec()));
        let out = self.record(&mut tape, &pv, e)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// `n` latents `I(ε_i)`; `ε_i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<LatentVector>> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(rng::derive(seed, "inference-net/sample", i as u64), 0);
                self.apply(&rng::normals(&mut r, self.noise_dim())).map(LatentVector)
            })
            .collect()
    }
}

/// Mean Euclidean distance over all pairs; 0 for fewer than two points.
pub fn mean_pairwise_distance(points: &[LatentVector]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += points[i].0.iter().zip(&points[j].0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

/// Expected distance between two independent `N(0, I_d)` draws,
/// `2·Γ((d+1)/2)/Γ(d/2)`.
pub fn prior_pairwise_distance(d: usize) -> f64 {
    // r(k) = Γ((k+1)/2)/Γ(k/2), with r(1) = 1/√π and r(k+1) = (k/2)/r(k)
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for k in 1..d {
        r = (k as f64 / 2.0) / r;
    }
    2.0 * r
}

#[derive(Clone, Debug)]
pub struct InferenceOutcome {
    pub net: InferenceNet,
    /// Training loss at every completed step.
    pub history: Vec<f64>,
    /// Step at which training stopped on a non-finite loss.
    pub halted_at: Option<usize>,
    pub result: InversionResult,
}

/// Trains an inference network against `obs` with the generator frozen, then
/// draws `n_samples` latents from it.
pub fn train_inference_network<G: Generator>(
    gen: &G,
    obs: &Observations,
    cfg: &InferenceNetConfig,
    seed: u64,
) -> Result<InferenceOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let d = gen.latent_dim();
    let before = gen.params().fingerprint();
    let mut sizes = vec![cfg.noise_dim.unwrap_or(d)];
    sizes.extend(&cfg.hidden);
    sizes.push(d);
    let mut net = InferenceNet::new(&sizes, cfg.init, seed)?;
    let draw = |step: usize, b: usize| {
        let mut r = rng::stream(rng::derive(seed, "inference-net/eps", step as u64), b as u64);
        rng::normals(&mut r, sizes[0])
    };
    let mut loss = DataLoss::new(obs, &cfg.loss)?;
    if cfg.steps > 0 {
        let z0 = LatentVector(net.apply(&draw(0, 0))?);
        loss = loss.calibrated_at(gen, &z0, None)?;
    }
    let mut adam = Adam::new(cfg.lr, &net.params.tensors().map(Tensor::numel).collect::<Vec<_>>());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut halted_at = None;

    for step in 0..cfg.steps {
        let mut tape = Tape::new(cfg.precision);
        let pv: Vec<Var> = net.params.tensors().map(|t| tape.input(t.clone())).collect();
        let gp = gen.param_vars(&mut tape, false);
        let mut data: Option<Var> = None;
        let mut zs = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let e = tape.constant(Tensor::from_vec(draw(step, b)));
            let z = net.record(&mut tape, &pv, e)?;
            let out = gen.forward(&mut tape, z, None, &gp)?;
            let l = loss.record(&mut tape, out, Some(z))?.total;
            data = Some(match data {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
            zs.push(z);
        }
        let mut total = tape.scale(data.expect("batch >= 1"), 1.0 / cfg.batch as f64);
        if cfg.collapse_weight > 0.0 {
            let reg = moment_penalty(&mut tape, &zs)?;
            let reg = tape.scale(reg, cfg.collapse_weight);
            total = tape.add(total, reg)?;
        }
        let value = tape.value(total).item();
        if !value.is_finite() {
            log::warn!("inference network: non-finite loss at step {step}; training halted");
            halted_at = Some(step);
            break;
        }
        history.push(value);
        let g = tape.backward(total, &Tensor::scalar(1.0))?;
        let grads: Vec<Vec<f64>> = pv.iter().map(|v| g.wrt(*v).into_data()).collect();
        let mut blocks: Vec<&mut [f64]> = net.params.tensors_mut().map(Tensor::data_mut).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.lr = cfg.lr_at(step);
        adam.step(&mut blocks, &refs);
    }
    assert_eq!(before, gen.params().fingerprint(), "inference network training must not modify generator weights");

    let samples = net
        .sample(cfg.n_samples, seed)?
        .into_iter()
        .map(|z| {
            let finite = z.0.iter().all(|v| v.is_finite());
            let err = if finite { well_mae(gen, &obs.wells, &z, None)? } else { f64::NAN };
            Ok(SampleResult {
                latent: z.0,
                labels: None,
                history: vec![],
                inversion_error: err,
                status: match (finite, halted_at) {
                    (true, _) => SampleStatus::Converged,
                    (false, it) => SampleStatus::NonFinite {
                        iteration: it.unwrap_or(cfg.steps),
                    },
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceOutcome {
        net,
        history,
        halted_at,
        result: InversionResult {
            method: "inference-net".into(),
            seed,
            samples,
            weights_fingerprint: fingerprint_hex(before),
            wall_clock_s: clock.elapsed().as_secs_f64(),
        },
    })
}

/// `Σ_j (mean_j² + (var_j − 1)²) / d` over a batch of latents.
fn moment_penalty(tape: &mut Tape, zs: &[Var]) -> Result<Var> {
    let n = zs.len() as f64;
    let d = tape.value(zs[0]).numel() as f64;
    let mut sum = zs[0];
    for &z in &zs[1..] {
        sum = tape.add(sum, z)?;
    }
    let mean = tape.scale(sum, 1.0 / n);
    let mut ss: Option<Var> = None;
    for &z in zs {
        let c = tape.sub(z, mean)?;
        let c = tape.square(c);
        ss = Some(match ss {
            None => c,
            Some(s) => tape.add(s, c)?,
        });
    }
    let var = tape.scale(ss.expect("non-empty batch"), 1.0 / n);
    let m2 = tape.square(mean);
    let v1 = tape.offset(var, -1.0);
    let v2 = tape.square(v1);
    let both = tape.add(m2, v2)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, 1.0 / d))
}
