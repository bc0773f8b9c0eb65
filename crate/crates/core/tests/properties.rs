//! Property tests for invariants that hold for arbitrary inputs.

use ndarray::{Array2, Array4};
use proptest::prelude::*;

use sourcefree::baselines::PipelineSpec;
use sourcefree::data::{batches, dequantize, quantize, BatchConfig, Dataset, Split};
use sourcefree::evaluation::{paired_t_test, EvalResult, Pipeline};
use sourcefree::losses::{self, LossReport, LossWeights};
use sourcefree::models::{Generator, GeneratorConfig};
use sourcefree::training::cosine_schedule;

fn dataset(n: usize) -> Dataset {
    Dataset::new(
        Array4::zeros((n, 1, 2, 2)),
        (0..n).map(|i| i % 3).collect(),
        3,
        Split::Train,
        "p",
    )
    .unwrap()
}

fn distributions(rows: usize, classes: usize, raw: &[f64]) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, classes), |(r, c)| raw[(r * classes + c) % raw.len()]);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn report_total_recomposes(
        w in (0.0..20.0f64, 0.0..20.0f64, 0.0..20.0f64),
        c in (0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64),
    ) {
        let weights = LossWeights::new(w.0, w.1, w.2).unwrap();
        let r = LossReport::new(c.0, c.1, c.2, &weights);
        prop_assert_eq!(r.total, w.0 * c.0 + w.1 * c.1 + w.2 * c.2);
    }

    #[test]
    fn entropy_lies_between_zero_and_ln_c(
        rows in 1usize..6,
        classes in 2usize..12,
        raw in prop::collection::vec(1e-6..1.0f64, 1..40),
    ) {
        let p = distributions(rows, classes, &raw);
        let h = losses::entropy_loss(&p).unwrap();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (classes as f64).ln() + 1e-12);
    }

    #[test]
    fn content_distance_is_a_symmetric_non_negative_mean(
        a in prop::collection::vec(-5.0..5.0f64, 12),
        b in prop::collection::vec(-5.0..5.0f64, 12),
    ) {
        let a = Array2::from_shape_vec((3, 4), a).unwrap();
        let b = Array2::from_shape_vec((3, 4), b).unwrap();
        let (ab, _) = losses::feature_distance(&a, &b).unwrap();
        let (ba, _) = losses::feature_distance(&b, &a).unwrap();
        let (aa, _) = losses::feature_distance(&a, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(aa, 0.0);
    }

    #[test]
    fn t_test_is_antisymmetric_and_shift_invariant(
        pairs in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 2..10),
        shift in -0.5..0.5f64,
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((ab.mean_diff + ba.mean_diff).abs() < 1e-12);
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let shifted = paired_t_test(&a2, &b2).unwrap();
        prop_assert!((shifted.p_value - ab.p_value).abs() < 1e-6);
    }

    #[test]
    fn training_batches_never_repeat_an_index(n in 2usize..200, bs in 2usize..40, seed: u64) {
        prop_assume!(bs <= n);
        let ds = dataset(n);
        let mut seen = vec![false; n];
        let mut count = 0;
        for batch in batches(&ds, &BatchConfig::train(bs, seed)).unwrap() {
            prop_assert_eq!(batch.indices.len(), bs);
            for i in batch.indices {
                prop_assert!(!seen[i]);
                seen[i] = true;
                count += 1;
            }
        }
        prop_assert_eq!(count, (n / bs) * bs);
        prop_assert_eq!(ds.label_reads(), 0);
    }

    #[test]
    fn eval_batches_cover_everything_in_order(n in 1usize..200, bs in 1usize..40) {
        let ds = dataset(n);
        let all: Vec<usize> = batches(&ds, &BatchConfig::eval(bs)).unwrap().flat_map(|b| b.indices).collect();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn quantization_round_trips(v: u8) {
        prop_assert_eq!(quantize(dequantize(v)), v);
    }

    #[test]
    fn cosine_schedule_decays_within_bounds(total in 1usize..1000, lr0 in 1e-6..1.0f64, step in 0usize..1000) {
        let step = step % (total + 1);
        let lr = cosine_schedule(step, total, lr0).unwrap();
        prop_assert!(lr >= 0.0 && lr <= lr0);
        if step < total {
            prop_assert!(cosine_schedule(step + 1, total, lr0).unwrap() <= lr);
        }
    }

    #[test]
    fn accuracy_is_the_correct_fraction(total in 1usize..10_000, correct in 0usize..10_000) {
        let correct = correct % (total + 1);
        let r = EvalResult::new(correct, total, Pipeline::NoDa, 0).unwrap();
        prop_assert_eq!(r.accuracy, correct as f64 / total as f64);
    }

    #[test]
    fn adabn_never_combines_with_translation(finetune: bool) {
        let spec = PipelineSpec { adabn: true, translate: true, finetune };
        prop_assert!(spec.resolve().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_outputs_stay_in_unit_range(seed: u64, scale in 0.05..3.0f64) {
        let cfg = GeneratorConfig { channels: 3, base_width: 4, res_blocks: 1, head_init_scale: scale };
        let g = Generator::<f32>::new(cfg, seed).unwrap();
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(b, c, h, w)| ((b + 2 * c + 3 * h + 5 * w) % 11) as f32 / 10.0);
        let y = g.forward(&x).unwrap();
        prop_assert_eq!(y.dim(), x.dim());
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
