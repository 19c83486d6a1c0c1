//! Well placement and well data over many seeds and weight maps.

use fluvinv::generator::{Generator, GridGeometry, LatentVector, ProceduralGenerator};
use fluvinv::survey::{distance_m, extract_well_data, place_wells, PlacementPolicy, WellDataset};
use proptest::prelude::*;

fn desk_map(nx: usize, ny: usize, phase: f64, zero_band: bool) -> Vec<f64> {
    (0..nx * ny)
        .map(|i| {
            let (x, y) = ((i % nx) as f64, (i / nx) as f64);
            if zero_band && (i / nx) % 7 == 3 {
                0.0
            } else {
                1.0 + 0.8 * ((x + phase) / 5.0).sin() * ((y - phase) / 3.0).cos()
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exclusion_zones_hold(seed in any::<u64>(), phase in 0.0f64..10.0, n_maps in 1usize..4) {
        let g = GridGeometry::desk();
        let policy = PlacementPolicy::default();
        let maps: Vec<Vec<f64>> = (0..n_maps).map(|k| desk_map(g.nx, g.ny, phase + k as f64, true)).collect();
        let layout = place_wells(&g, &maps, &policy, seed).unwrap();
        prop_assert_eq!(layout.legacy.len(), policy.legacy_wells);
        prop_assert_eq!(layout.extra.len(), n_maps);
        for (i, &a) in layout.legacy.iter().enumerate() {
            for &b in &layout.legacy[i + 1..] {
                prop_assert!(distance_m(&g, a, b) >= policy.legacy.exclusion_m);
            }
        }
        for (case, extra) in layout.extra.iter().enumerate() {
            prop_assert_eq!(extra.len(), policy.extra_wells);
            for (i, &a) in extra.iter().enumerate() {
                // zero-weight cells are never drawn
                prop_assert!(maps[case][a.1 * g.nx + a.0] > 0.0);
                for &b in &extra[i + 1..] {
                    prop_assert!(distance_m(&g, a, b) >= policy.extra.exclusion_m);
                }
                for &l in &layout.legacy {
                    prop_assert!(distance_m(&g, a, l) >= policy.legacy_in_stage2.exclusion_m);
                }
            }
        }
        prop_assert_eq!(place_wells(&g, &maps, &policy, seed).unwrap(), layout);
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000) {
        let g = GridGeometry::desk();
        let gen = ProceduralGenerator::new(g, 16).unwrap();
        let z = LatentVector((0..16).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0).collect());
        let grid = gen.generate(&z, None).unwrap();
        let layout = place_wells(&g, &[grid.vertical_mean_coarse()], &PlacementPolicy::default(), seed).unwrap();
        let wells = extract_well_data(&grid, &layout.locations(0, 20).unwrap()).unwrap();
        prop_assert_eq!(wells.n_obs(), 20 * g.nz);
        let back = WellDataset::from_csv(g, &wells.to_csv()).unwrap();
        // nine significant digits in the file
        for (a, b) in wells.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 5e-9 * a.abs().max(1e-300));
        }
        for w in &wells.wells {
            for (iz, v) in w.values.iter().enumerate() {
                prop_assert_eq!(*v, grid.coarse_at(w.ix, w.iy, iz));
            }
        }
    }
}

#[test]
fn paper_geometry_many_seeds() {
    let g = GridGeometry::paper();
    let policy = PlacementPolicy::default();
    let map = desk_map(g.nx, g.ny, 2.0, false);
    for seed in 0..200 {
        let layout = place_wells(&g, std::slice::from_ref(&map), &policy, seed).unwrap();
        let all = layout.locations(0, policy.legacy_wells + policy.extra_wells).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.iter().all(|&(x, y)| x < g.nx && y < g.ny));
    }
}
