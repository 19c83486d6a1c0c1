use std::time::Instant;

use fluvinv::generator::{Architecture, Generator, GridGeometry, LatentVector, NeuralGenerator, ProceduralGenerator};
use fluvinv::geophysics::{BurdenConfig, PsfConfig, RockPhysicsParams, SeismicModel};
use fluvinv::inversion::{
    latent_optimize, pivotal_tune, DataLossConfig, LatentOptConfig, Observations, PivotalConfig, SeismicObservation,
    TuningMode,
};
use fluvinv::metrics::Summary;
use fluvinv::survey::{extract_well_data, place_wells, PlacementPolicy};

fn observations(n_wells: usize, seismic: bool) -> Observations {
    let g = GridGeometry::desk();
    let truth_gen = ProceduralGenerator::new(g, 16).unwrap();
    let z: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let truth = truth_gen.generate(&LatentVector(z), None).unwrap();
    let layout = place_wells(&g, &[truth.vertical_mean_coarse()], &PlacementPolicy::default(), 3).unwrap();
    let wells = extract_well_data(&truth, &layout.locations(0, n_wells).unwrap()).unwrap();
    let seismic = seismic.then(|| {
        let model = SeismicModel::for_grid(
            &truth,
            RockPhysicsParams::default(),
            BurdenConfig::default(),
            PsfConfig::default(),
        )
        .unwrap();
        let cube = model.forward(&truth).unwrap();
        SeismicObservation { model, cube }
    });
    Observations { wells, seismic }
}

#[test]
fn tuning_closes_the_gap_left_by_truncated_latent_optimization() {
    let gen = NeuralGenerator::random(Architecture::desk(), 11).unwrap();
    // the full four-configuration sweep runs in the acceptance suite
    let (n_wells, seismic) = (4, false);
    let clock = Instant::now();
    let obs = observations(n_wells, seismic);
    let loss = DataLossConfig {
        seismic,
        ..DataLossConfig::default()
    };
    let lo = LatentOptConfig {
        n_restarts: 2,
        iterations: 100,
        lr: 0.01,
        loss,
        ..LatentOptConfig::default()
    };
    let inv = latent_optimize(&gen, &obs, &lo, 1).unwrap();
    let pivots: Vec<_> = inv.latents().into_iter().map(|z| (z, None)).collect();
    let cfg = PivotalConfig {
        anchors_per_step: 2,
        mode: TuningMode::Shared,
        loss,
        ..PivotalConfig::default()
    };
    let tuned = pivotal_tune(&gen, &pivots, &obs, &cfg, 2).unwrap();
    let before = inv.inversion_errors();
    let after = tuned.result.inversion_errors();
    let median = Summary::of(&after).median;
    eprintln!("{n_wells} wells, seismic {seismic}: {before:?} -> {after:?} in {:?}", clock.elapsed());
    assert!(before.iter().zip(&after).all(|(b, a)| a < b), "{before:?} -> {after:?}");
    assert!(median <= 0.01, "median {median}");
}
