use std::path::Path;

use proptest::prelude::*;

use psp_cli::config::RunConfig;
use psp_cli::files::{decode_image, delta_from_bytes, delta_to_bytes, dequantize, encode_image, quantize};
use psp_core::Tensor;

fn delta(c: usize, h: usize, w: usize, eps: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-eps..=eps, c * h * w).prop_map(move |v| Tensor::new(vec![c, h, w], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_delta_round_trips_bitwise(
        d in (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| delta(c, h, w, 0.1))
    ) {
        let bytes = delta_to_bytes(&d).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 8 * d.len());
        let back = delta_from_bytes(&bytes, Path::new("x")).unwrap();
        prop_assert_eq!(back.shape(), d.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&d));
    }

    #[test]
    fn truncated_delta_is_rejected(cut in 1usize..40) {
        let d = Tensor::zeros(&[1, 2, 2]);
        let bytes = delta_to_bytes(&d).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(delta_from_bytes(&bytes[..bytes.len() - cut], Path::new("x")).is_err());
    }

    #[test]
    fn quantize_is_monotone_and_within_half_a_level(a in -1.0f64..=1.0, b in -1.0f64..=1.0, eps in 0.001f64..1.0) {
        let (a, b) = (a * eps, b * eps);
        if a <= b {
            prop_assert!(quantize(a, eps) <= quantize(b, eps));
        }
        let err = (dequantize(quantize(a, eps), eps) - a).abs();
        prop_assert!(err <= eps / 255.0 + 1e-12);
    }

    #[test]
    fn image_round_trips_within_quantization(
        (d, eps) in (prop::sample::select(vec![1usize, 3]), 1usize..7, 1usize..7, 0.01f64..0.5)
            .prop_flat_map(|(c, h, w, eps)| (delta(c, h, w, eps), Just(eps)))
    ) {
        let img = encode_image(&d, eps).unwrap();
        let back = decode_image(&img, eps, Path::new("x")).unwrap();
        prop_assert_eq!(back.shape(), d.shape());
        prop_assert!(back.max_abs_diff(&d) <= eps / 255.0 + 1e-12);
    }

    #[test]
    fn config_echo_reparses(samples in 1usize..64, eps in 0.001f64..0.5, seed in any::<u64>(), epochs in 1usize..30, size in 8usize..64) {
        let mut cfg = RunConfig::default();
        cfg.attack.samples = samples;
        cfg.attack.epsilon = eps;
        cfg.attack.seed = seed;
        cfg.train.epochs = epochs;
        cfg.data.size = size;
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        prop_assert_eq!(back.echo(), cfg.echo());
        prop_assert_eq!(back, cfg);
    }
}
