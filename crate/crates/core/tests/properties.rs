use proptest::prelude::*;
use tunnelmag::analysis::{convergence, metric_scale, st_median, unmagnify, RingCalibration};
use tunnelmag::flow::DisplacementField;
use tunnelmag::magnify::{TemporalBand, TemporalFilter};
use tunnelmag::pyramid::FilterBank;
use tunnelmag::Grid;

const W: usize = 16;
const H: usize = 16;

fn field_from(values: &[f64]) -> DisplacementField {
    let mut f = DisplacementField::zeros(W, H);
    f.u = Grid::from_shape_fn((H, W), |(y, x)| values[(y * W + x) % values.len()]);
    f.v = Grid::from_shape_fn((H, W), |(y, x)| -values[(x * H + y + 3) % values.len()]);
    f
}

fn shifted(f: &DisplacementField, du: f64, dv: f64) -> DisplacementField {
    let mut g = f.clone();
    g.u.mapv_inplace(|u| u + du);
    g.v.mapv_inplace(|v| v + dv);
    g
}

fn close(a: &Grid, b: &Grid, tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn fields() -> impl Strategy<Value = Vec<DisplacementField>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 7..40), 3..6)
        .prop_map(|frames| frames.iter().map(|v| field_from(v)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn median_commutes_with_constant_offsets(fs in fields(), du in -5.0f64..5.0, dv in -5.0f64..5.0) {
        let base = st_median(&fs, 3, 3).unwrap();
        let moved: Vec<_> = fs.iter().map(|f| shifted(f, du, dv)).collect();
        let out = st_median(&moved, 3, 3).unwrap();
        for (a, b) in base.iter().zip(&out) {
            prop_assert!(close(&shifted(a, du, dv).u, &b.u, 1e-12));
            prop_assert!(close(&shifted(a, du, dv).v, &b.v, 1e-12));
            prop_assert_eq!(&a.valid, &b.valid);
        }
    }

    #[test]
    fn median_fixes_uniform_fields(u in -3.0f64..3.0, v in -3.0f64..3.0, n in 1usize..5) {
        let fs = vec![DisplacementField::uniform(W, H, u, v); n];
        prop_assert_eq!(st_median(&fs, 5, 3).unwrap(), fs);
    }

    #[test]
    fn convergence_ignores_rigid_translation(fs in fields(), du in -4.0f64..4.0, dv in -4.0f64..4.0) {
        let cal = RingCalibration::new("R", [3.0, 4.0], [12.0, 11.0], 250.0).unwrap();
        let t: Vec<f64> = (0..fs.len()).map(|i| i as f64 * 60.0).collect();
        let moved: Vec<_> = fs.iter().map(|f| shifted(f, du, dv)).collect();
        let a = convergence(&fs, &cal, 15.0, &t).unwrap();
        let b = convergence(&moved, &cal, 15.0, &t).unwrap();
        for (x, y) in a.values_mm.iter().zip(&b.values_mm) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn unit_conversions_commute(u in -10.0f64..10.0, v in -10.0f64..10.0, alpha in 0.0f64..50.0, sep in 10.0f64..5000.0) {
        let cal = RingCalibration::new("R", [0.0, 0.0], [0.0, 37.0], sep).unwrap();
        let d = [u, v];
        let a = unmagnify(&metric_scale(&d, &cal), alpha);
        let b = metric_scale(&unmagnify(&d, alpha), &cal);
        prop_assert!((a[0] - b[0]).abs() <= 1e-12 * a[0].abs().max(1.0));
        prop_assert!((a[1] - b[1]).abs() <= 1e-12 * a[1].abs().max(1.0));
    }

    #[test]
    fn temporal_filter_is_a_linear_projection(
        x in prop::collection::vec(-1.0f64..1.0, 24),
        y in prop::collection::vec(-1.0f64..1.0, 24),
        k in -3.0f64..3.0,
        drift in any::<bool>(),
    ) {
        let t: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut band = TemporalBand::new(0.0, 0.2);
        if !drift {
            band = band.without_drift();
        }
        let filter = TemporalFilter::new(&band, &t).unwrap();
        let apply = |s: &[f64]| {
            let mut s = s.to_vec();
            filter.apply(&mut s);
            s
        };
        let combined: Vec<f64> = x.iter().zip(&y).map(|(a, b)| k * a + b).collect();
        let (fx, fy, fc) = (apply(&x), apply(&y), apply(&combined));
        for i in 0..24 {
            prop_assert!((fc[i] - (k * fx[i] + fy[i])).abs() < 1e-9);
        }
        for (a, b) in apply(&fx).iter().zip(&fx) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pyramid_is_linear_and_invertible(
        seed in prop::collection::vec(0.0f64..1.0, 32..64),
        k in -2.0f64..2.0,
    ) {
        let bank = FilterBank::new(32, 32, 2, 4).unwrap();
        let f = Grid::from_shape_fn((32, 32), |(y, x)| seed[(y * 32 + x) % seed.len()]);
        let g = Grid::from_shape_fn((32, 32), |(y, x)| seed[(x * 7 + y) % seed.len()]);
        let combined = &f * k + &g;
        let (pf, pg, pc) = (
            bank.decompose(&f).unwrap(),
            bank.decompose(&g).unwrap(),
            bank.decompose(&combined).unwrap(),
        );
        for ((a, b), c) in pf.bands.iter().zip(&pg.bands).zip(&pc.bands) {
            for ((a, b), c) in a.iter().zip(b).zip(c) {
                prop_assert!((a * k + b - c).norm() < 1e-9);
            }
        }
        prop_assert!(close(&bank.reconstruct(&pc).unwrap(), &combined, 1e-9));
    }
}
