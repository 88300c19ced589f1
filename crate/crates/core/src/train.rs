//! Two-phase training with the asymmetric loss, plus MAE and F1 metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::featurize::{resize, TestCase, CHANNELS};
use crate::grid::{DropSource, Grid, IrDropMap};
use crate::model::{AttUNet, AttUNetConfig, Mode};
use crate::nn::{self, Adam, Tensor};
use crate::synth::case_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, rename_all = "camelCase"))]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Constant rate used by the pretrain phase.
    pub learning_rate: f64,
    /// Cosine bounds used by the finetune phase.
    pub lr_min: f64,
    pub lr_max: f64,
    /// Extra warm restarts of the cosine schedule; 0 is a single cycle.
    pub restarts: usize,
    /// Dropout at the shallowest decoder level and at the bottleneck.
    pub dropout_min: f64,
    pub dropout_max: f64,
    pub batch_size: usize,
    /// Weight on underestimated pixels.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 450,
            learning_rate: 0.0005,
            lr_min: 0.00001,
            lr_max: 0.0005,
            restarts: 0,
            dropout_min: 0.3,
            dropout_max: 0.5,
            batch_size: 4,
            lambda: 2.0,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 600,
            dropout_min: 0.1,
            dropout_max: 0.1,
            ..Self::pretrain()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lambda >= 1.0) {
            return bad("lambda must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_min > 0.0) || !(self.lr_max >= self.lr_min) {
            return bad("learning rates must be positive with lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.dropout_min)
            || !(0.0..1.0).contains(&self.dropout_max)
            || self.dropout_min > self.dropout_max
        {
            return bad("dropout range must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.phase {
            Phase::Pretrain => self.learning_rate,
            Phase::Finetune => {
                let cycle = self.epochs.div_ceil(self.restarts + 1).max(1);
                let t = if self.restarts == 0 { epoch.min(cycle) } else { epoch % cycle };
                cosine_lr(t as f64, cycle as f64, self.lr_min, self.lr_max).unwrap_or(self.lr_min)
            }
        }
    }

    pub fn dropout(&self, model: &AttUNetConfig) -> Vec<f64> {
        AttUNetConfig::dropout_schedule(model.depth(), self.dropout_min, self.dropout_max)
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} values, truth {b}")));
    }
    Ok(())
}

/// Mean of `|x − y|`, weighted by `lambda` where the prediction is low.
pub fn asym_loss(pred: &[f64], truth: &[f64], lambda: f64) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&x, &y)| if x < y { lambda * (y - x) } else { x - y })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Loss and its gradient with respect to `pred`.
pub fn asym_loss_grad<T: nn::Real>(pred: &[T], truth: &[T], lambda: f64, grad: &mut [T]) -> f64 {
    let n = pred.len() as f64;
    let inv = T::of(1.0 / n);
    let lam = T::of(lambda);
    let mut s = 0.0;
    for ((g, &x), &y) in grad.iter_mut().zip(pred).zip(truth) {
        if x < y {
            s += lambda * (y - x).as_f64();
            *g = -lam * inv;
        } else {
            s += (x - y).as_f64();
            *g = if x > y { inv } else { T::zero() };
        }
    }
    s / n
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·T_cur/T_max))`.
pub fn cosine_lr(t_cur: f64, t_max: f64, lr_min: f64, lr_max: f64) -> Result<f64> {
    if !(t_max > 0.0) {
        return Err(Error::InvalidParameter("cosine period must be positive".into()));
    }
    if !(0.0..=t_max).contains(&t_cur) {
        return Err(Error::InvalidParameter(format!("T_cur {t_cur} outside [0, {t_max}]")));
    }
    if t_cur == t_max {
        return Ok(lr_min);
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (core::f64::consts::PI * t_cur / t_max).cos()))
}

/// Mean absolute error of two maps in volts, reported in millivolts.
pub fn mae_mv(pred: &Grid, truth: &Grid) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("maps {:?} and {:?}", pred.dims(), truth.dims())));
    }
    let n = truth.data.len().max(1) as f64;
    Ok(1e3 * pred.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Value at or above which a pixel counts as a hotspot.
    pub threshold: f64,
    /// The truth map is constant, so every pixel is positive.
    pub degenerate: bool,
}

/// The truth value marking the top 10 % of pixels: the `⌈0.1·n⌉`-th largest.
pub fn top_decile_threshold(truth: &[f64]) -> f64 {
    let mut v = truth.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = (truth.len() as f64 * 0.1).ceil().max(1.0) as usize;
    v[k - 1]
}

/// Precision, recall and F1 for top-decile hotspot labels. Truth and
/// prediction share the threshold taken from the truth map.
pub fn f1_score(pred: &[f64], truth: &[f64]) -> Result<F1Score> {
    same_len(pred.len(), truth.len())?;
    if truth.is_empty() {
        return Err(Error::Shape("empty map".into()));
    }
    let threshold = top_decile_threshold(truth);
    let degenerate = truth.iter().all(|&v| v == truth[0]);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p >= threshold, t >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        f1,
        precision,
        recall,
        threshold,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct CaseMetrics {
    pub id: String,
    pub mae_mv: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub degenerate: bool,
}

/// Averages over test cases, with the per-case rows.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct Metrics {
    pub mae_mv: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_case: Vec<CaseMetrics>,
}

impl Metrics {
    pub fn from_cases(per_case: Vec<CaseMetrics>) -> Self {
        let n = per_case.len().max(1) as f64;
        let mean = |f: fn(&CaseMetrics) -> f64| per_case.iter().map(f).sum::<f64>() / n;
        Self {
            mae_mv: mean(|c| c.mae_mv),
            f1: mean(|c| c.f1),
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            per_case,
        }
    }
}

/// Compares a predicted map with the truth at the truth's resolution.
pub fn case_metrics(id: &str, pred: &Grid, truth: &Grid) -> Result<CaseMetrics> {
    let f = f1_score(&pred.data, &truth.data)?;
    Ok(CaseMetrics {
        id: id.into(),
        mae_mv: mae_mv(pred, truth)?,
        f1: f.f1,
        precision: f.precision,
        recall: f.recall,
        degenerate: f.degenerate,
    })
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss on normalized targets.
    pub loss: f64,
    /// Running training MAE and F1 over the epoch's batches.
    pub mae_mv: f64,
    pub f1: f64,
}

/// Largest ground-truth drop in a corpus, used to bring targets to `[0, 1]`.
pub fn target_scale(corpus: &[TestCase]) -> Result<f64> {
    let mut m: f64 = 0.0;
    for tc in corpus {
        let truth = tc
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("test case {} has no ground truth", tc.id)))?;
        m = m.max(truth.drop.max());
    }
    Ok(if m > 0.0 && m.is_finite() { m } else { 1.0 })
}

struct Sample {
    input: Vec<f32>,
    target: Vec<f32>,
}

fn samples(corpus: &[TestCase], scale: f64) -> Result<(usize, usize, Vec<Sample>)> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::InvalidParameter("training corpus is empty".into()))?;
    let (h, w) = (first.features.height, first.features.width);
    let mut out = Vec::with_capacity(corpus.len());
    for tc in corpus {
        if (tc.features.height, tc.features.width) != (h, w) {
            return Err(Error::Shape(format!("test case {} is not {h}x{w}", tc.id)));
        }
        let truth = tc
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("test case {} has no ground truth", tc.id)))?;
        let t = resize(&truth.drop, h, w);
        out.push(Sample {
            input: tc.features.data.clone(),
            target: t.data.iter().map(|&v| (v / scale) as f32).collect(),
        });
    }
    Ok((h, w, out))
}

/// Runs `config.epochs` epochs over `corpus`. Targets are divided by
/// `scale` (volts). `on_epoch` sees each history row and the model after
/// the epoch, for checkpointing; an error from it stops training.
pub fn train<F>(
    model: &mut AttUNet<f32>,
    corpus: &[TestCase],
    config: &TrainConfig,
    scale: f64,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &AttUNet<f32>) -> Result<()>,
{
    config.check()?;
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter("target scale must be positive".into()));
    }
    let (h, w, data) = samples(corpus, scale)?;
    let dropout = config.dropout(&model.config);
    let mut opt = Adam::new(model.param_count());
    let mut grads = vec![0.0f32; model.param_count()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let p = h * w;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = nn::rng(case_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mae_sum, mut f1_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * CHANNELS * p);
            let mut y = Vec::with_capacity(n * p);
            for &i in chunk {
                x.extend_from_slice(&data[i].input);
                y.extend_from_slice(&data[i].target);
            }
            let x = Tensor::from_vec(n, CHANNELS, h, w, x);
            let mode = Mode::Train {
                dropout: dropout.clone(),
                seed: case_seed(config.seed ^ 0xD5A1_7E55, (epoch as u64) << 32 | b as u64),
            };
            let (out, tape) = model.forward(&x, &mode).map_err(|e| with_context(e, epoch, b))?;
            let mut dout = Tensor::zeros(n, 1, h, w);
            let loss = asym_loss_grad(&out.data, &y, config.lambda, &mut dout.data);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            grads.fill(0.0);
            model.backward(&tape, &dout, &mut grads, false);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, batch {b}")));
            }
            opt.update(&mut model.params, &grads, lr);
            model.update_running_stats(&tape);

            loss_sum += loss;
            for s in 0..n {
                let pr: Vec<f64> = out.data[s * p..(s + 1) * p].iter().map(|&v| v.max(0.0) as f64 * scale).collect();
                let tr: Vec<f64> = y[s * p..(s + 1) * p].iter().map(|&v| v as f64 * scale).collect();
                mae_sum += 1e3 * pr.iter().zip(&tr).map(|(a, b)| (a - b).abs()).sum::<f64>() / p as f64 / n as f64;
                f1_sum += f1_score(&pr, &tr)?.f1 / n as f64;
            }
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / nb,
            mae_mv: mae_sum / nb,
            f1: f1_sum / nb,
        };
        history.push(rec);
        on_epoch(&rec, model)?;
    }
    Ok(history)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

fn expect_phase(config: &TrainConfig, phase: Phase) -> Result<()> {
    if config.phase != phase {
        return Err(Error::InvalidParameter(format!(
            "configuration is for {:?}, expected {phase:?}",
            config.phase
        )));
    }
    Ok(())
}

/// Pretraining on a synthetic corpus.
pub fn pretrain<F>(model: &mut AttUNet<f32>, corpus: &[TestCase], config: &TrainConfig, scale: f64, on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &AttUNet<f32>) -> Result<()>,
{
    expect_phase(config, Phase::Pretrain)?;
    train(model, corpus, config, scale, on_epoch)
}

/// Finetuning a pretrained model on the target corpus.
pub fn finetune<F>(model: &mut AttUNet<f32>, corpus: &[TestCase], config: &TrainConfig, scale: f64, on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &AttUNet<f32>) -> Result<()>,
{
    expect_phase(config, Phase::Finetune)?;
    train(model, corpus, config, scale, on_epoch)
}

/// Inference on one case: drop map in volts at the case's original size.
pub fn predict_case(model: &AttUNet<f32>, tc: &TestCase, scale: f64) -> Result<IrDropMap> {
    let f = &tc.features;
    let x = Tensor::from_vec(1, f.data.len() / (f.height * f.width), f.height, f.width, f.data.clone());
    let y = model.predict(&x)?;
    let g = Grid::from_vec(f.height, f.width, y.data.iter().map(|&v| v as f64 * scale).collect());
    let (oh, ow) = f.original_dims;
    Ok(IrDropMap {
        drop: resize(&g, oh, ow),
        source: DropSource::Predicted,
    })
}

/// Per-case and mean metrics on cases that carry ground truth.
pub fn evaluate(model: &AttUNet<f32>, cases: &[TestCase], scale: f64) -> Result<Metrics> {
    let mut rows = Vec::with_capacity(cases.len());
    for tc in cases {
        let truth = tc
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("test case {} has no ground truth", tc.id)))?;
        let pred = predict_case(model, tc, scale)?;
        rows.push(case_metrics(&tc.id, &pred.drop, &truth.drop)?);
    }
    Ok(Metrics::from_cases(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(asym_loss(&[1.0, 1.0], &[0.0, 2.0], 2.0).unwrap(), 1.5);
        assert_eq!(asym_loss(&[0.3, 0.7], &[0.3, 0.7], 2.0).unwrap(), 0.0);
        assert!(asym_loss(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0.0, 600.0, 1e-5, 5e-4).unwrap(), 5e-4);
        assert_eq!(cosine_lr(600.0, 600.0, 1e-5, 5e-4).unwrap(), 1e-5);
        assert!((cosine_lr(300.0, 600.0, 1e-5, 5e-4).unwrap() - 0.000255).abs() < 1e-15);
        assert!(cosine_lr(1.0, 0.0, 1e-5, 5e-4).is_err());
    }

    #[test]
    fn schedules() {
        let ft = TrainConfig::finetune();
        assert_eq!(ft.lr_at(0), 5e-4);
        let pre = TrainConfig::pretrain();
        assert!((0..450).all(|e| pre.lr_at(e) == 5e-4));
        let r = TrainConfig {
            epochs: 20,
            restarts: 1,
            ..TrainConfig::finetune()
        };
        assert_eq!(r.lr_at(10), 5e-4);
        assert!(r.lr_at(9) < r.lr_at(1));
        assert_eq!(pre.dropout(&AttUNetConfig::default()), [0.5, 0.45, 0.4, 0.35, 0.3]);
    }

    #[test]
    fn metric_examples() {
        let a = Grid::from_vec(1, 2, vec![1e-3, 2e-3]);
        let b = Grid::from_vec(1, 2, vec![2e-3, 4e-3]);
        assert!((mae_mv(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(f1_score(&t, &t).unwrap().f1, 1.0);
        let mut p = vec![0.0; 10];
        p[0] = 100.0;
        let s = f1_score(&p, &t).unwrap();
        assert_eq!((s.precision, s.f1), (0.0, 0.0));
        assert!(f1_score(&[1.0; 4], &[2.0; 4]).unwrap().degenerate);
    }
}
