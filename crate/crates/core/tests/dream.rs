use fluvinv::inversion::{dream_zs, gelman_rubin, DreamConfig};

fn std_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

#[test]
fn five_dim_gaussian_is_calibrated() {
    let cfg = DreamConfig {
        burn_in: 5000,
        samples: 10_000,
        ..DreamConfig::default()
    };
    let ens = dream_zs(std_normal, 5, &cfg, 42).unwrap();
    let pooled = ens.pooled();
    let n = pooled.len() as f64;
    for j in 0..5 {
        let mean = pooled.iter().map(|s| s[j]).sum::<f64>() / n;
        let var = pooled.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "dim {j}: mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "dim {j}: variance {var}");
    }
    let rhat = gelman_rubin(&ens).unwrap();
    assert!(rhat.iter().all(|r| *r < 1.05), "{rhat:?}");
}

#[test]
fn bimodal_target_visits_both_modes() {
    let mixture = |z: &[f64]| {
        let a = -0.5 * ((z[0] - 3.0).powi(2) + z[1].powi(2));
        let b = -0.5 * ((z[0] + 3.0).powi(2) + z[1].powi(2));
        a.max(b) + (1.0 + (a.min(b) - a.max(b)).exp()).ln()
    };
    let cfg = DreamConfig {
        burn_in: 5000,
        samples: 10_000,
        init_scale: 3.0,
        ..DreamConfig::default()
    };
    let ens = dream_zs(mixture, 2, &cfg, 7).unwrap();
    let pooled = ens.pooled();
    let right = pooled.iter().filter(|s| s[0] > 0.0).count() as f64 / pooled.len() as f64;
    assert!((0.1..=0.9).contains(&right), "mass right of zero: {right}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg = DreamConfig {
        burn_in: 200,
        samples: 200,
        ..DreamConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| dream_zs(std_normal, 3, &cfg, 5).unwrap())
    };
    assert_eq!(run(1), run(3));
}
