use fogseg_core::checkpoint::{Checkpoint, NamedTensor, OptimizerState};
use fogseg_core::config::RunConfig;
use fogseg_core::data::{hflip, luminance, Sample};
use fogseg_core::loss::class_weights;
use fogseg_core::metrics::ConfusionMatrix;
use fogseg_core::tensor::kernels::conv2d_forward;
use fogseg_core::tensor::{ConvGeometry, Graph, Reduction};
use fogseg_core::Tensor;
use proptest::prelude::*;

fn labels(len: usize, k: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![9 => 0..k, 1 => Just(255u8)], len)
}

fn named(name: String, data: Vec<f32>) -> NamedTensor {
    NamedTensor {
        shape: vec![data.len()],
        name,
        data,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_confusion_equals_one_pass(
        a in labels(48, 5), pa in prop::collection::vec(0u8..5, 48),
        b in labels(48, 5), pb in prop::collection::vec(0u8..5, 48),
    ) {
        let mut whole = ConfusionMatrix::with_ignore(5, 255);
        whole.update(&[pa.clone(), pb.clone()].concat(), &[a.clone(), b.clone()].concat()).unwrap();
        let mut left = ConfusionMatrix::with_ignore(5, 255);
        left.update(&pa, &a).unwrap();
        let mut right = ConfusionMatrix::with_ignore(5, 255);
        right.update(&pb, &b).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(&left, &whole);
        let valid = a.iter().chain(&b).filter(|&&l| l != 255).count() as u64;
        prop_assert_eq!(whole.total(), valid);
    }

    #[test]
    fn metrics_lie_in_unit_interval(gt in labels(64, 4), pred in prop::collection::vec(0u8..4, 64)) {
        let mut cm = ConfusionMatrix::with_ignore(4, 255);
        cm.update(&pred, &gt).unwrap();
        prop_assume!(cm.total() > 0);
        let m = cm.metrics().unwrap();
        for v in [m.global_acc, m.class_avg, m.miou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.miou <= m.class_avg + 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        epoch in any::<u64>(), seed in any::<u64>(), config in "[ -~]{0,40}",
        data in prop::collection::vec(-1e6f32..1e6, 0..20), step in any::<u64>(),
    ) {
        let mut ck = Checkpoint::new(epoch, seed, config);
        ck.tensors.push(named("w".into(), data.clone()));
        ck.optimizers.push(OptimizerState { name: "adam".into(), step, tensors: vec![named("m.w".into(), data)] });
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(data in prop::collection::vec(-1.0f32..1.0, 1..8), cut in 1usize..16) {
        let mut ck = Checkpoint::new(1, 2, "x");
        ck.tensors.push(named("w".into(), data));
        let bytes = ck.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), epochs in 1usize..500, lr in 1e-6f64..1.0, c in 1.01f64..3.0) {
        let mut cfg = RunConfig::default();
        cfg.run.seed = seed;
        cfg.run.epochs = epochs;
        cfg.optim.lr = lr;
        cfg.loss.class_weight_c = c;
        prop_assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn class_weights_are_monotone_and_bounded(counts in prop::collection::vec(0u64..10_000, 2..19), c in 1.02f64..2.0) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let w = class_weights(&counts, c).unwrap().weights;
        let upper = 1.0 / c.ln();
        let lower = 1.0 / (c + 1.0).ln();
        for (i, &wi) in w.iter().enumerate() {
            prop_assert!(wi <= upper + 1e-12 && wi >= lower - 1e-12);
            for (j, &wj) in w.iter().enumerate() {
                if counts[i] < counts[j] {
                    prop_assert!(wi > wj);
                }
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(h in 1usize..5, w in 1usize..7, seed in any::<u32>()) {
        let v = |i: usize| ((i as u64 * 2654435761 + seed as u64) % 1000) as f32 / 1000.0;
        let s = Sample {
            rgb: Tensor::from_fn(vec![3, h, w], v),
            depth: Some(Tensor::from_fn(vec![1, h, w], |i| v(i + 7))),
            labels: (0..h * w).map(|i| (i % 19) as u8).collect(),
        };
        prop_assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn luminance_is_linear(x in prop::collection::vec(0.0f32..1.0, 12), a in 0.0f32..2.0) {
        let coeffs = [0.299, 0.587, 0.144];
        let t = Tensor::new(vec![3, 2, 2], x.clone()).unwrap();
        let scaled = Tensor::new(vec![3, 2, 2], x.iter().map(|v| v * a).collect::<Vec<_>>()).unwrap();
        let (l, ls) = (luminance(&t, coeffs), luminance(&scaled, coeffs));
        for (p, q) in l.data().iter().zip(ls.data()) {
            prop_assert!((p * a - q).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_output_size_follows_geometry(
        h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..3, dil in 1usize..4,
    ) {
        let span = dil * (k - 1) + 1;
        prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
        let x = Tensor::<f32>::zeros(vec![1, 2, h, w]);
        let wt = Tensor::<f32>::zeros(vec![3, 2, k, k]);
        let geom = ConvGeometry::new(stride, pad).with_dilation(dil, dil);
        let y = conv2d_forward(&x, &wt, None, geom).unwrap();
        let out = |n: usize| (n + 2 * pad - span) / stride + 1;
        prop_assert_eq!(y.shape(), &[1, 3, out(h), out(w)][..]);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_shift_invariant(
        logits in prop::collection::vec(-5.0f64..5.0, 3 * 4), shift in -3.0f64..3.0, lab in prop::collection::vec(0u8..3, 4),
    ) {
        let loss = |v: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(vec![1, 3, 2, 2], v).unwrap());
            let l = g.softmax_cross_entropy(x, &lab, &[1.0; 3], 255, Reduction::Mean).unwrap();
            g.value(l).data()[0]
        };
        let base = loss(logits.clone());
        prop_assert!(base >= 0.0);
        let moved = loss(logits.iter().map(|v| v + shift).collect());
        prop_assert!((base - moved).abs() < 1e-9);
    }
}
