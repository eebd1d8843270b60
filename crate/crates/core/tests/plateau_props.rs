mod common;

use common::{check_change_point, two_line_series};
use pmisc::combiner::{Layout, Surrogate};
use pmisc::knots::{KnotFamily, LevelToKnots};
use pmisc::midx::MultiIndexSet;
use pmisc::plateau::{detect_plateau, fit_change_point, PlateauParams};
use pmisc::spectral::{envelope, to_spectral, Envelope};
use proptest::prelude::*;

fn arb_series() -> impl Strategy<Value = Vec<(usize, f64)>> {
    (0usize..4, prop::collection::vec(-8.0f64..2.0, 4..30)).prop_map(|(start, ys)| {
        ys.into_iter().enumerate().map(|(i, y)| (start + i, y)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fit_matches_brute_force_oracle(series in arb_series()) {
        let r = check_change_point(&series);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn noiseless_two_lines_are_recovered_exactly(
        start in 0usize..3,
        len0 in 2usize..10,
        len1 in 2usize..10,
        m0 in -3.0f64..-0.5,
        m1 in -0.2f64..0.2,
        c0 in -1.0f64..1.0,
    ) {
        // Continuous at the break; the slopes differ by at least 0.3, so no
        // other split fits exactly.
        let (series, c1) = two_line_series(start, len0, len1, m0, m1, c0);
        let f = fit_change_point(&series).unwrap();
        prop_assert_eq!(f.kappa, start + len0);
        prop_assert!((f.m0 - m0).abs() < 1e-9 && (f.c0 - c0).abs() < 1e-8);
        prop_assert!((f.m1 - m1).abs() < 1e-9 && (f.c1 - c1).abs() < 1e-8);
    }

    #[test]
    fn detection_is_scale_equivariant(ys in prop::collection::vec(-12.0f64..0.0, 1..25), shift in -5i32..5) {
        let mut v: Vec<f64> = ys.iter().map(|y| 10f64.powf(*y)).collect();
        for i in (0..v.len() - 1).rev() {
            v[i] = v[i].max(v[i + 1]);
        }
        let s = 10f64.powi(shift);
        let p = PlateauParams::default();
        let a = detect_plateau(&Envelope { values: v.clone() }, &p);
        let b = detect_plateau(&Envelope { values: v.iter().map(|x| x * s).collect() }, &p);
        prop_assert_eq!(a.is_plateau, b.is_plateau);
        prop_assert_eq!(a.fit.map(|f| f.kappa), b.fit.map(|f| f.kappa));
        if let (Some(fa), Some(fb)) = (a.fit, b.fit) {
            prop_assert!((fa.m1 - fb.m1).abs() < 1e-9);
            prop_assert!((fa.c1 + shift as f64 - fb.c1).abs() < 1e-8);
        }
        if a.is_plateau {
            prop_assert!((b.plateau_level / (a.plateau_level * s) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn envelopes_are_non_increasing(w in 0u32..6, k in 1.0f64..8.0) {
        let layout = Layout { n_model: 0, n_y: 2, family: KnotFamily::SymmetricLeja, rule: LevelToKnots::TwoStep };
        let s = Surrogate::from_fn(layout, MultiIndexSet::total_degree(2, w), |_, pts| {
            Ok(pts.iter().map(|y| (k * y[0]).cos() * (1.0 + y[1]).recip()).collect())
        })
        .unwrap();
        let x = to_spectral(&s).unwrap();
        let e = envelope(&x);
        prop_assert_eq!(e.k_e(), x.max_total_degree() as usize);
        prop_assert!(e.values.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(e.values.iter().all(|v| *v > 0.0));
    }
}
