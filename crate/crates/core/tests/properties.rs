use proptest::prelude::*;
use transfer_lab::attack::{step_and_project, AttackConfig, Norm};
use transfer_lab::eval::{normalize_trend, rank_order_class};
use transfer_lab::losses::{LossKind, LossSpec};
use transfer_lab::uap::{decode_uap, encode_uap, UapArtifact};
use transfer_lab::Tensor;

fn image(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, len)
}

proptest! {
    #[test]
    fn steps_stay_in_ball_and_range(
        orig in image(48),
        start in image(48),
        dir in prop::collection::vec(-5.0f32..5.0, 48),
        eps in 0.0f32..0.3,
        alpha in 0.001f32..0.2,
        l2 in any::<bool>(),
    ) {
        let cfg = AttackConfig {
            epsilon: eps,
            alpha,
            norm: if l2 { Norm::L2 } else { Norm::Linf },
            ..AttackConfig::plain(LossSpec::new(LossKind::Logit))
        };
        let shape = [3, 4, 4];
        let orig = Tensor::new(&shape, orig).unwrap();
        let cur = Tensor::new(&shape, start).unwrap();
        let next = step_and_project(&cur, &orig, &Tensor::new(&shape, dir).unwrap(), &cfg).unwrap();
        let diff: Vec<f64> = next.data().iter().zip(orig.data()).map(|(&a, &b)| (a - b) as f64).collect();
        prop_assert!(next.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if l2 {
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(d <= eps as f64 + 1e-6, "{d} > {eps}");
        } else {
            prop_assert!(diff.iter().all(|d| d.abs() <= eps as f64 + 1e-7));
        }
    }

    #[test]
    fn uap_files_roundtrip(
        delta in prop::collection::vec(-0.1f32..0.1, 12),
        target in 0usize..10,
        source in "[a-z_+]{1,20}",
    ) {
        let uap = UapArtifact {
            perturbation: Tensor::new(&[3, 2, 2], delta).unwrap(),
            target,
            epsilon: 0.1,
            source,
        };
        prop_assert_eq!(decode_uap(&encode_uap(&uap)).unwrap(), uap);
    }

    #[test]
    fn normalized_trends_start_at_one(series in prop::collection::vec(0.01f64..100.0, 1..50)) {
        let n = normalize_trend(&series).unwrap();
        prop_assert_eq!(n[0], 1.0);
        prop_assert_eq!(n.len(), series.len());
    }

    #[test]
    fn rank_order_is_a_permutation(logits in prop::collection::vec(-10.0f32..10.0, 2..12)) {
        let mut classes: Vec<usize> = (1..=logits.len()).map(|r| rank_order_class(&logits, r).unwrap()).collect();
        prop_assert_eq!(classes[0], Tensor::from_vec(logits.clone()).argmax());
        classes.sort_unstable();
        prop_assert_eq!(classes, (0..logits.len()).collect::<Vec<_>>());
    }
}
