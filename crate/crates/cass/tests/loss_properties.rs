//! Property tests for the pairing loss: bounds, symmetry, scale invariance.

use cass::loss::{cass_loss, EmbeddingBatch, ArmTag, DEFAULT_EPS};
use cass::tensor::Tensor;
use proptest::prelude::*;

fn batch(b: usize, d: usize, data: Vec<f64>, tag: ArmTag) -> EmbeddingBatch {
    EmbeddingBatch::new(Tensor::from_vec(&[b, d], data).unwrap(), tag).unwrap()
}

fn batch_pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..9).prop_flat_map(|(b, d)| {
        let n = b * d;
        (
            Just(b),
            Just(d),
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn loss_stays_in_bounds((b, d, rv, tv) in batch_pair()) {
        let r = batch(b, d, rv, ArmTag::Cnn);
        let t = batch(b, d, tv, ArmTag::Transformer);
        let loss = cass_loss(&r, &t, DEFAULT_EPS).unwrap();
        prop_assert!(loss >= -1e-12, "loss {} below 0", loss);
        prop_assert!(loss <= 4.0 + 1e-12, "loss {} above 4", loss);
    }

    #[test]
    fn loss_is_symmetric_in_arms((b, d, rv, tv) in batch_pair()) {
        let r = batch(b, d, rv.clone(), ArmTag::Cnn);
        let t = batch(b, d, tv.clone(), ArmTag::Transformer);
        let swapped_r = batch(b, d, tv, ArmTag::Cnn);
        let swapped_t = batch(b, d, rv, ArmTag::Transformer);
        let a = cass_loss(&r, &t, DEFAULT_EPS).unwrap();
        let bwd = cass_loss(&swapped_r, &swapped_t, DEFAULT_EPS).unwrap();
        prop_assert_eq!(a, bwd);
    }

    #[test]
    fn loss_ignores_positive_per_arm_scaling(
        (b, d, rv, tv) in batch_pair(),
        alpha in 0.05..20.0f64,
        beta in 0.05..20.0f64,
    ) {
        // Keep rows away from the eps clamp so both branches are smooth.
        let min_norm = |v: &[f64]| {
            (0..b)
                .map(|i| v[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        prop_assume!(min_norm(&rv) > 1e-3 && min_norm(&tv) > 1e-3);
        let r = batch(b, d, rv.clone(), ArmTag::Cnn);
        let t = batch(b, d, tv.clone(), ArmTag::Transformer);
        let rs = batch(b, d, rv.iter().map(|x| alpha * x).collect(), ArmTag::Cnn);
        let ts = batch(b, d, tv.iter().map(|x| beta * x).collect(), ArmTag::Transformer);
        let plain = cass_loss(&r, &t, DEFAULT_EPS).unwrap();
        let scaled = cass_loss(&rs, &ts, DEFAULT_EPS).unwrap();
        prop_assert!((plain - scaled).abs() < 1e-8, "{} vs {}", plain, scaled);
    }
}
