use fluvinv::generator::{Generator, GridGeometry, LatentVector, LinearGenerator};
use fluvinv::inversion::{variational_infer, FlowConfig, Likelihood, Observations};
use fluvinv::metrics::symmetric_eigen;
use fluvinv::survey::extract_well_data;
use fluvinv::Precision;

fn tiny() -> GridGeometry {
    GridGeometry {
        nx: 8,
        ny: 8,
        nz: 4,
        dx: 50.0,
        dy: 50.0,
        dz: 0.5,
    }
}

struct Conjugate {
    gen: LinearGenerator,
    obs: Observations,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

/// Posterior `N(μ, Λ⁻¹)` with `Λ = I + AᵀA/σ²`, `μ = Λ⁻¹Aᵀ(y − c)/σ²`.
fn conjugate_case(sigma: f64) -> Conjugate {
    let d = 4;
    let g = tiny();
    let gen = LinearGenerator::random(g, d, 0.2, 17).unwrap();
    let truth = gen
        .generate_with(&LatentVector(vec![0.8, -0.5, 0.3, 1.1]), None, Precision::F64)
        .unwrap();
    let wells = extract_well_data(&truth, &[(1, 1), (5, 2), (3, 6)]).unwrap();
    let idx = wells.flat_indices();
    let y = wells.values();
    let a = gen.matrix().data();
    let c = gen.offset().data();
    let mut lambda = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (k, &cell) in idx.iter().enumerate() {
        let row = &a[cell * d..(cell + 1) * d];
        for i in 0..d {
            rhs[i] += row[i] * (y[k] - c[cell]) / (sigma * sigma);
            for j in 0..d {
                lambda[i * d + j] += row[i] * row[j] / (sigma * sigma);
            }
        }
    }
    (0..d).for_each(|i| lambda[i * d + i] += 1.0);
    let (vals, vecs) = symmetric_eigen(&lambda, d).unwrap();
    let mut cov = vec![0.0; d * d];
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += vecs[k][i] * vecs[k][j] / vals[k];
            }
        }
    }
    let mean = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * rhs[j]).sum()).collect();
    Conjugate {
        gen,
        obs: Observations { wells, seismic: None },
        mean,
        cov,
    }
}

fn moments(draws: &[LatentVector]) -> (Vec<f64>, Vec<f64>) {
    let n = draws.len() as f64;
    let d = draws[0].dim();
    let mean: Vec<f64> = (0..d).map(|j| draws.iter().map(|z| z.0[j]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| draws.iter().map(|z| (z.0[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

#[test]
fn flow_recovers_conjugate_gaussian_posterior() {
    let sigma = 0.025;
    let case = conjugate_case(sigma);
    let cfg = FlowConfig {
        steps: 3000,
        lr: 0.01,
        lr_final: Some(2e-4),
        n_samples: 10,
        ..FlowConfig::default()
    };
    let out = variational_infer(&case.gen, &case.obs, &cfg, 3).unwrap();
    let (mean, var) = moments(&out.flow.sample(20_000, 99));
    let norm = case.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = mean.iter().zip(&case.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 0.05 * norm, "mean {mean:?} vs {:?}", case.mean);
    for (j, v) in var.iter().enumerate() {
        let exact = case.cov[j * 4 + j];
        assert!((v / exact - 1.0).abs() <= 0.1, "dim {j}: variance {v} vs {exact}");
    }
    assert_eq!(out.result.samples.len(), 10);
}

#[test]
fn without_data_the_flow_stays_at_the_prior() {
    let case = conjugate_case(0.025);
    let cfg = FlowConfig {
        steps: 1000,
        lr: 0.01,
        lr_final: Some(1e-4),
        n_samples: 2,
        likelihood: Likelihood::none(),
        ..FlowConfig::default()
    };
    let out = variational_infer(&case.gen, &case.obs, &cfg, 1).unwrap();
    // KL(q‖p) = E_q[log q − log p] estimated by sampling
    let draws = out.flow.sample(5000, 8);
    let kl = draws
        .iter()
        .map(|z| {
            let log_p = -0.5 * z.0.iter().map(|v| v * v).sum::<f64>() - 2.0 * (2.0 * std::f64::consts::PI).ln();
            out.flow.log_density(&z.0) - log_p
        })
        .sum::<f64>()
        / draws.len() as f64;
    assert!(kl.abs() < 0.05, "KL {kl}");
}

#[test]
fn smoothed_elbo_does_not_decrease() {
    let case = conjugate_case(0.05);
    let mut good = 0;
    for seed in 0..10 {
        let cfg = FlowConfig {
            steps: 600,
            n_samples: 1,
            ..FlowConfig::default()
        };
        let h = variational_infer(&case.gen, &case.obs, &cfg, seed).unwrap().elbo_history;
        // block means over windows of 100 steps, with a 3-standard-error tolerance
        let blocks: Vec<(f64, f64)> = h
            .chunks(100)
            .map(|c| {
                let m = c.iter().sum::<f64>() / c.len() as f64;
                let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
                (m, (v / c.len() as f64).sqrt())
            })
            .collect();
        let ok = blocks
            .windows(2)
            .all(|w| w[1].0 >= w[0].0 - 3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
        good += ok as usize;
    }
    assert!(good >= 9, "{good}/10 runs with non-decreasing smoothed ELBO");
}
