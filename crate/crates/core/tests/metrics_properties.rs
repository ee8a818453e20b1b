use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use selflearn::metrics::{ece, normalized_mean_error, top1_error, ErrorGrid, NormalizerTable, PredictionSet, DEFAULT_ECE_BINS};
use selflearn::seed;

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random probability rows and labels drawn from a separate stream.
fn random_set(n: usize, k: usize, sharpness: f64, calibrated: bool, stream: &str) -> PredictionSet {
    let mut rng = seed::rng(11, stream);
    let mut probs = Array2::zeros((n, k));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = (0..k).map(|_| sharpness * rng.sample::<f64, _>(StandardNormal)).collect();
        let p = softmax_row(&z);
        let label = if calibrated {
            WeightedIndex::new(&p).unwrap().sample(&mut rng)
        } else {
            rng.random_range(0..k)
        };
        for (j, v) in p.iter().enumerate() {
            probs[(i, j)] = *v;
        }
        labels.push(label);
    }
    PredictionSet::new(probs, labels).unwrap()
}

#[test]
fn calibrated_generator_has_small_ece() {
    let preds = random_set(100_000, 5, 2.0, true, "calibrated");
    let e = ece(&preds, DEFAULT_ECE_BINS).unwrap();
    assert!(e < 0.01, "ece {e}");
}

#[test]
fn uninformative_labels_are_miscalibrated() {
    let preds = random_set(20_000, 5, 2.0, false, "uniform-labels");
    assert!(ece(&preds, DEFAULT_ECE_BINS).unwrap() > 0.2);
}

#[test]
fn top1_error_agrees_with_independent_count() {
    let preds = random_set(5_000, 7, 1.0, true, "top1");
    let correct = preds
        .probs()
        .outer_iter()
        .zip(preds.labels())
        .filter(|(row, &label)| {
            // first index holding the maximum
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v == max) == Some(label)
        })
        .count();
    let expected = 1.0 - correct as f64 / preds.len() as f64;
    assert!((top1_error(&preds) - expected).abs() < 1e-15);
}

#[test]
fn single_bin_ece_is_the_confidence_gap() {
    let preds = random_set(3_000, 4, 1.5, false, "single-bin");
    let conf: f64 = preds.confidences().iter().sum::<f64>() / preds.len() as f64;
    let acc = 1.0 - top1_error(&preds);
    assert!((ece(&preds, 1).unwrap() - (acc - conf).abs()).abs() < 1e-12);
}

#[test]
fn confident_coin_flip_has_ece_one_half() {
    let probs = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let preds = PredictionSet::new(probs, vec![0, 1, 1, 0]).unwrap();
    assert_eq!(ece(&preds, DEFAULT_ECE_BINS).unwrap(), 0.5);
}

fn table() -> impl Strategy<Value = Vec<(String, u32, f64, f64)>> {
    (1usize..5, 1u32..4).prop_flat_map(|(shifts, sevs)| {
        prop::collection::vec((0.01f64..1.0, 0.05f64..1.0), shifts * sevs as usize).prop_map(move |vals| {
            vals.into_iter()
                .enumerate()
                .map(|(i, (m, b))| (format!("shift{}", i / sevs as usize), 1 + (i as u32 % sevs), m, b))
                .collect()
        })
    })
}

fn grids(rows: &[(String, u32, f64, f64)], scale: f64) -> (ErrorGrid, NormalizerTable) {
    let model = ErrorGrid::from_entries(rows.iter().map(|(s, v, m, _)| (s.clone(), *v, (m * scale).min(1.0)))).unwrap();
    let base = ErrorGrid::from_entries(rows.iter().map(|(s, v, _, b)| (s.clone(), *v, *b))).unwrap();
    (model, NormalizerTable::new(base).unwrap())
}

proptest! {
    #[test]
    fn ece_ignores_sample_order(seed in 0u64..1000) {
        let preds = random_set(500, 3, 1.5, true, &format!("order/{seed}"));
        let n = preds.len();
        let order: Vec<usize> = (0..n).rev().collect();
        let probs = preds.probs().select(ndarray::Axis(0), &order);
        let labels = order.iter().map(|&i| preds.labels()[i]).collect();
        let reversed = PredictionSet::new(probs, labels).unwrap();
        let a = ece(&preds, DEFAULT_ECE_BINS).unwrap();
        let b = ece(&reversed, DEFAULT_ECE_BINS).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn normalized_error_is_scale_equivariant(rows in table(), k in 0.1f64..1.0) {
        let (model, base) = grids(&rows, 1.0);
        let (scaled, _) = grids(&rows, k);
        let a = normalized_mean_error(&model, &base).unwrap();
        let b = normalized_mean_error(&scaled, &base).unwrap();
        prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn normalized_error_ignores_row_order(rows in table()) {
        let (model, base) = grids(&rows, 1.0);
        let mut rev = rows.clone();
        rev.reverse();
        let (model_rev, base_rev) = grids(&rev, 1.0);
        prop_assert_eq!(
            normalized_mean_error(&model, &base).unwrap(),
            normalized_mean_error(&model_rev, &base_rev).unwrap()
        );
    }

    #[test]
    fn normalizing_by_itself_gives_one(rows in table()) {
        let base = ErrorGrid::from_entries(rows.iter().map(|(s, v, _, b)| (s.clone(), *v, *b))).unwrap();
        let model = base.clone();
        let r = normalized_mean_error(&model, &NormalizerTable::new(base).unwrap()).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
    }
}
