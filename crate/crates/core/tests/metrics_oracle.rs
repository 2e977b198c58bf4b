mod common;

use candle_core::{Device, Tensor};
use common::criteria::{self, assert_all, ssim_oracle};
use eyewear_core::image::ImageRgb;
use eyewear_core::metrics::{self, cosine, fid, psnr, ssim};
use eyewear_core::segmentation::SegmentationLabel;
use proptest::prelude::*;

#[test]
fn oracles() {
    assert_all(&criteria::metrics_oracles());
}

fn image(v: Vec<f64>, h: usize, w: usize) -> ImageRgb {
    ImageRgb::new(Tensor::from_vec(v, (3, h, w), &Device::Cpu).unwrap()).unwrap()
}

fn pixels(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 3 * h * w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_symmetric_and_matches_loop(a in pixels(12, 12), b in pixels(12, 12)) {
        let (a, b) = (image(a, 12, 12), image(b, 12, 12));
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ab - ssim_oracle(&a, &b)).abs() <= 1e-6);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_symmetric_and_finite(a in pixels(4, 4), b in pixels(4, 4)) {
        let (a, b) = (image(a, 4, 4), image(b, 4, 4));
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!(p.is_finite());
    }

    #[test]
    fn fid_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..16),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..16),
    ) {
        let ab = fid(&a, &b).unwrap();
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() <= 1e-6);
        prop_assert!(ab >= -1e-6);
    }

    #[test]
    fn cosine_bounded(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn perfect_prediction_scores_one(labels in prop::collection::vec(0u8..5, 36)) {
        let l = SegmentationLabel::new(6, 6, labels).unwrap();
        prop_assert_eq!(metrics::pixel_accuracy(&l, &l).unwrap(), 1.0);
        prop_assert_eq!(metrics::mean_iou(&l, &l).unwrap(), 1.0);
    }
}

#[test]
fn mismatched_sizes_are_rejected() {
    let a = image(vec![0.0; 3 * 4 * 4], 4, 4);
    let b = image(vec![0.0; 3 * 4 * 5], 4, 5);
    assert!(ssim(&a, &b).is_err());
    assert!(psnr(&a, &b).is_err());
    assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}
