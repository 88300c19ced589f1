use irgrid_core::featurize::TestCase;
use irgrid_core::grid::Grid;
use irgrid_core::model::{AttUNet, AttUNetConfig};
use irgrid_core::synth::{generate_indexed, SynthParams, Span};
use irgrid_core::train::*;
use proptest::prelude::*;

fn tiny_corpus(n: u64) -> Vec<TestCase> {
    let p = SynthParams {
        seed: 21,
        die_size: Span { min: 32, max: 48 },
        layer_pitches: [1, 4, 6, 8, 8],
        blob_spread: Span { min: 2.0, max: 6.0 },
        ..SynthParams::default()
    };
    (0..n).map(|i| generate_indexed(&p, i, 32).unwrap().case).collect()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        ..TrainConfig::pretrain()
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus(4);
    let scale = target_scale(&corpus).unwrap();
    let run = || {
        let mut m = AttUNet::<f32>::new(AttUNetConfig::narrowed(16), 5).unwrap();
        let h = train(&mut m, &corpus, &short(2), scale, |_, _| Ok(())).unwrap();
        (h, m.params, m.buffers)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let corpus = tiny_corpus(6);
    let scale = target_scale(&corpus).unwrap();
    let mut m = AttUNet::<f32>::new(AttUNetConfig::narrowed(16), 9).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        learning_rate: 2e-3,
        ..short(25)
    };
    let h = train(&mut m, &corpus, &cfg, scale, |_, _| Ok(())).unwrap();
    let first = h[0].loss;
    let last = h[h.len() - 3..].iter().map(|r| r.loss).sum::<f64>() / 3.0;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn training_errors_are_reported() {
    let mut m = AttUNet::<f32>::new(AttUNetConfig::narrowed(16), 1).unwrap();
    assert!(train(&mut m, &[], &short(1), 1.0, |_, _| Ok(())).is_err());
    let corpus = tiny_corpus(1);
    assert!(finetune(&mut m, &corpus, &short(1), 1.0, |_, _| Ok(())).is_err());
    let mut unlabeled = corpus.clone();
    unlabeled[0].ground_truth = None;
    assert!(train(&mut m, &unlabeled, &short(1), 1.0, |_, _| Ok(())).is_err());
}

#[test]
fn predictions_come_back_at_original_size() {
    let corpus = tiny_corpus(1);
    let m = AttUNet::<f32>::new(AttUNetConfig::narrowed(16), 2).unwrap();
    let p = predict_case(&m, &corpus[0], 0.01).unwrap();
    assert_eq!(p.drop.dims(), corpus[0].ground_truth.as_ref().unwrap().drop.dims());
    assert!(p.drop.data.iter().all(|&v| v >= 0.0));
}

/// Brute-force F1: label the ⌈n/10⌉ largest truth values (ties included) by
/// counting, not sorting.
fn f1_oracle(pred: &[f64], truth: &[f64]) -> f64 {
    let k = (truth.len() + 9) / 10;
    let t = *truth
        .iter()
        .filter(|&&c| truth.iter().filter(|&&v| v >= c).count() >= k)
        .fold(&f64::NEG_INFINITY, |a, b| if b > a { b } else { a });
    let (mut tp, mut np, mut nt) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(truth) {
        tp += ((p >= t) && (y >= t)) as u8 as f64;
        np += (p >= t) as u8 as f64;
        nt += (y >= t) as u8 as f64;
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (np + nt)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn f1_matches_counting_oracle(
        truth in prop::collection::vec(0u8..20, 1..60),
        noise in prop::collection::vec(-3i8..=3, 60),
    ) {
        let t: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = t.iter().zip(&noise).map(|(&v, &d)| v + d as f64).collect();
        let got = f1_score(&p, &t).unwrap().f1;
        prop_assert!((got - f1_oracle(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn mae_matches_direct_sum(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
        let n = a.len();
        let got = mae_mv(&Grid::from_vec(1, n, a.clone()), &Grid::from_vec(1, n, b.clone())).unwrap();
        let mut s = 0.0;
        for i in 0..n {
            s += (a[i] - b[i]).abs();
        }
        prop_assert!((got - 1e3 * s / n as f64).abs() <= 1e-9 * got.abs().max(1.0));
    }

    #[test]
    fn underestimates_cost_lambda_times_more(
        y in prop::collection::vec(-10.0f64..10.0, 1..40),
        d in 1e-3f64..5.0,
        lambda in 1.0f64..8.0,
    ) {
        let lo: Vec<f64> = y.iter().map(|v| v - d).collect();
        let hi: Vec<f64> = y.iter().map(|v| v + d).collect();
        let under = asym_loss(&lo, &y, lambda).unwrap();
        let over = asym_loss(&hi, &y, lambda).unwrap();
        prop_assert!((under - lambda * over).abs() <= 1e-12 * under);
        let mixed: Vec<f64> = lo.iter().zip(&hi).enumerate().map(|(i, (a, b))| if i % 2 == 0 { *a } else { *b }).collect();
        let mae = mixed.iter().zip(&y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64;
        prop_assert_eq!(asym_loss(&mixed, &y, 1.0).unwrap(), mae);
    }

    #[test]
    fn cosine_never_rises_within_a_cycle(t_max in 1usize..2000, lo in 0.0f64..1e-4, span in 0.0f64..1e-3) {
        let hi = lo + span;
        let mut prev = f64::INFINITY;
        for t in 0..=t_max {
            let v = cosine_lr(t as f64, t_max as f64, lo, hi).unwrap();
            prop_assert!(v <= prev && v >= lo && v <= hi);
            prev = v;
        }
    }
}
