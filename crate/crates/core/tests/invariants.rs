//! Property tests for tensor operations, rock physics, seismic and metrics.

use fluvinv::generator::GridGeometry;
use fluvinv::geophysics::{rock_physics, BurdenConfig, PsfConfig, RockPhysicsParams, SeismicModel};
use fluvinv::metrics::{classical_mds, mae, stress, wasserstein1, DistanceMatrix};
use fluvinv::{Precision, Tape, Tensor};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn broadcast_add_matches_loops(a in values(12), b in values(4)) {
        let mut t = Tape::new(Precision::F64);
        let x = t.constant(Tensor::new(vec![3, 4], a.clone()).unwrap());
        let y = t.constant(Tensor::new(vec![4], b.clone()).unwrap());
        let s = t.add(x, y).unwrap();
        let r = t.add(y, x).unwrap();
        prop_assert_eq!(t.value(s).shape(), &[3, 4]);
        for i in 0..12 {
            prop_assert_eq!(t.value(s).data()[i], a[i] + b[i % 4]);
        }
        prop_assert_eq!(t.value(s).data(), t.value(r).data());
    }

    #[test]
    fn sum_gradient_is_ones(a in values(10)) {
        let mut t = Tape::new(Precision::F64);
        let x = t.input(Tensor::new(vec![2, 5], a).unwrap());
        let s = t.sum(x);
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        prop_assert!(g.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn f32_mode_rounds_values(a in values(6)) {
        let mut t = Tape::new(Precision::F32);
        let x = t.constant(Tensor::new(vec![6], a).unwrap());
        let y = t.scale(x, 1.1);
        for v in t.value(y).data() {
            prop_assert_eq!(*v, *v as f32 as f64);
        }
    }

    #[test]
    fn mae_is_a_metric(a in values(20), b in values(20), c in values(20)) {
        let ab = mae(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mae(&b, &a).unwrap());
        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        prop_assert!(ab <= mae(&a, &c).unwrap() + mae(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn wasserstein_symmetric_and_shift(a in values(15), b in values(15), shift in -5.0f64..5.0) {
        let w = wasserstein1(&a, &b);
        prop_assert!((w - wasserstein1(&b, &a)).abs() < 1e-9);
        prop_assert_eq!(wasserstein1(&a, &a), 0.0);
        let moved: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!((wasserstein1(&a, &moved) - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn mds_recovers_planar_distances(p in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..10)) {
        let pts: Vec<Vec<f64>> = p.iter().map(|(x, y)| vec![*x, *y]).collect();
        let d = DistanceMatrix::euclidean(&pts).unwrap();
        let emb = classical_mds(&d, 2).unwrap();
        let scale: f64 = (0..pts.len()).flat_map(|i| (0..pts.len()).map(move |j| (i, j))).map(|(i, j)| d.get(i, j)).sum();
        prop_assume!(scale > 1e-3);
        prop_assert!(stress(&d, &emb) < 1e-6);
    }

    #[test]
    fn density_affine_vp_monotone(f in 0.0f64..1.0, df in 1e-4f64..0.1) {
        let p = RockPhysicsParams::default();
        let (r0, _) = rock_physics(0.0, &p).unwrap();
        let (r1, _) = rock_physics(1.0, &p).unwrap();
        let (rf, vf) = rock_physics(f, &p).unwrap();
        prop_assert!((rf - (r0 + f * (r1 - r0))).abs() < 1e-12);
        let g = (f + df).min(1.0);
        prop_assume!(g > f);
        let (_, vg) = rock_physics(g, &p).unwrap();
        prop_assert!(vg > vf);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn seismic_convolution_is_linear(a in values(8 * 6 * 5), b in values(8 * 6 * 5), s in -2.0f64..2.0) {
        let g = GridGeometry { nx: 8, ny: 6, nz: 4, dx: 5.0, dy: 5.0, dz: 0.5 };
        let m = SeismicModel::new(g, RockPhysicsParams::default(), BurdenConfig::default(), PsfConfig::default(), 2500.0).unwrap();
        let nz = m.cube_geometry().nz;
        let ra = Tensor::from_fn(vec![nz, 6, 8], |i| a[i % a.len()]);
        let rb = Tensor::from_fn(vec![nz, 6, 8], |i| b[(i * 7) % b.len()]);
        let both = Tensor::from_fn(vec![nz, 6, 8], |i| ra.data()[i] + s * rb.data()[i]);
        let (ca, cb, cc) = (m.convolve(&ra).unwrap(), m.convolve(&rb).unwrap(), m.convolve(&both).unwrap());
        for i in 0..cc.numel() {
            prop_assert!((cc.data()[i] - (ca.data()[i] + s * cb.data()[i])).abs() < 1e-9);
        }
    }
}
