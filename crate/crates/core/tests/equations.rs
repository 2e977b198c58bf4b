mod common;

use candle_core::{DType, Tensor};
use common::criteria::{self, assert_all};
use common::{cpu, scalar, values};
use eyewear_core::losses::{cosine_distance, info_nce, latent_norm_loss};
use eyewear_core::modulation::{fuse, modulate, FusionWeight};
use proptest::prelude::*;

#[test]
fn modulation_matches_scalar_loop() {
    assert_all(&[criteria::modulation_oracle()]);
}

#[test]
fn gamma_endpoints_and_midpoint() {
    assert_all(&[criteria::gamma_zero_independence(), criteria::gamma_linearity()]);
}

#[test]
fn target_label_matches_oracle() {
    assert_all(&[criteria::label_combination_oracle()]);
}

#[test]
fn contrastive_and_norm_values() {
    assert_all(&[criteria::nce_closed_form(), criteria::norm_and_cosine()]);
}

#[test]
fn disentangle_and_lab() {
    assert_all(&[criteria::disentangle_cases()]);
}

#[test]
fn stage_sums() {
    assert_all(&[criteria::weighted_sums()]);
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, v.len()), &cpu()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_distance_in_range(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let d = scalar(&cosine_distance(&row(&a), &row(&b)).unwrap());
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
    }

    #[test]
    fn modulated_rows_have_unit_scale(x in prop::collection::vec(-3.0f64..3.0, 16)) {
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.5);
        let zeros = Tensor::zeros((1, 16), DType::F64, &cpu()).unwrap();
        let out = values(&modulate(&row(&x), &zeros, &zeros).unwrap());
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn fusion_is_convex(g in 0.0f64..=1.0, a in prop::collection::vec(-2.0f64..2.0, 4), b in prop::collection::vec(-2.0f64..2.0, 4)) {
        let (ta, tb) = (row(&a), row(&b));
        let (alpha, _) = fuse(&ta, &ta, &tb, &tb, FusionWeight::new(g).unwrap()).unwrap();
        for (i, v) in values(&alpha).into_iter().enumerate() {
            let want = (1.0 - g) * a[i] + g * b[i];
            prop_assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusion_weight_outside_unit_interval_rejected(g in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        prop_assert!(FusionWeight::new(g).is_err());
    }

    #[test]
    fn latent_norm_is_scaled_l2(d in -1.0f64..1.0) {
        prop_assume!(d.abs() > 1e-3);
        let w = Tensor::zeros((3, 512), DType::F64, &cpu()).unwrap();
        let v = scalar(&latent_norm_loss(&(&w + d).unwrap(), &w).unwrap());
        prop_assert!((v - d.abs() * (3.0f64 * 512.0).sqrt()).abs() <= 1e-6);
    }

    #[test]
    fn nce_decreases_with_positive_similarity(p in -0.9f64..0.8) {
        let t = |v: f64| Tensor::new(&[v], &cpu()).unwrap();
        let neg = Tensor::new(&[[0.1, -0.2]], &cpu()).unwrap();
        let lo = scalar(&info_nce(&t(p), &t(0.0), &neg, 1.0).unwrap());
        let hi = scalar(&info_nce(&t(p + 0.1), &t(0.0), &neg, 1.0).unwrap());
        prop_assert!(hi < lo);
    }
}
