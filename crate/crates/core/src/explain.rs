//! Gradient saliency for predicted hotspots and the upsizing loop it drives.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::featurize::{FeatureStack, CHANNEL_NAMES, RESISTANCE_OFFSET};
use crate::grid::Grid;
use crate::model::{AttUNet, Mode};
use crate::netlist::Layer;
use crate::nn::{Real, Tensor};

/// A model whose output map can be differentiated with respect to its input.
pub trait Differentiable {
    /// Output map at the input's resolution.
    fn predict(&self, x: &FeatureStack) -> Result<Grid>;

    /// Gradient of the mean of the listed output pixels with respect to
    /// every input value, channel-major. A pixel listed twice counts twice.
    fn mean_gradient(&self, x: &FeatureStack, pixels: &[(usize, usize)]) -> Result<Vec<f64>>;
}

fn to_tensor<T: Real>(x: &FeatureStack) -> Tensor<T> {
    let c = x.data.len() / (x.height * x.width);
    Tensor::from_vec(1, c, x.height, x.width, x.data.iter().map(|&v| T::of(v as f64)).collect())
}

impl<T: Real> Differentiable for AttUNet<T> {
    fn predict(&self, x: &FeatureStack) -> Result<Grid> {
        let y = AttUNet::predict(self, &to_tensor(x))?;
        Ok(Grid::from_vec(x.height, x.width, y.data.iter().map(|v| v.as_f64()).collect()))
    }

    fn mean_gradient(&self, x: &FeatureStack, pixels: &[(usize, usize)]) -> Result<Vec<f64>> {
        if pixels.is_empty() {
            return Err(Error::EmptyHotspots);
        }
        let (out, tape) = self.forward(&to_tensor(x), &Mode::Eval)?;
        let mut dout = Tensor::zeros(1, 1, x.height, x.width);
        let wk = T::of(1.0 / pixels.len() as f64);
        for &(r, c) in pixels {
            if r >= x.height || c >= x.width {
                return Err(Error::Shape(format!("pixel ({r}, {c}) outside {}x{}", x.height, x.width)));
            }
            let k = r * x.width + c;
            // The inference clamp passes gradient only where it is inactive.
            if out.data[k] > T::zero() {
                dout.data[k] += wk;
            }
        }
        let mut grads = vec![T::zero(); self.param_count()];
        let dx = self.backward(&tape, &dout, &mut grads, true).unwrap();
        Ok(dx.data.iter().map(|v| v.as_f64()).collect())
    }
}

/// `F(X) = ⟨w, X⟩` at every output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl Differentiable for LinearSurrogate {
    fn predict(&self, x: &FeatureStack) -> Result<Grid> {
        if x.data.len() != self.weights.len() {
            return Err(Error::Shape("surrogate weights do not match the input".into()));
        }
        let v: f64 = self.weights.iter().zip(&x.data).map(|(w, &x)| w * x as f64).sum();
        Ok(Grid::from_vec(self.height, self.width, vec![v; self.height * self.width]))
    }

    fn mean_gradient(&self, x: &FeatureStack, pixels: &[(usize, usize)]) -> Result<Vec<f64>> {
        if pixels.is_empty() {
            return Err(Error::EmptyHotspots);
        }
        if x.data.len() != self.weights.len() {
            return Err(Error::Shape("surrogate weights do not match the input".into()));
        }
        Ok(self.weights.clone())
    }
}

/// High-drop output pixels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct HotspotSet {
    /// `(row, col)` in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub dr_max: f64,
    pub dr_th: f64,
    /// The map was all zero, so no pixel qualifies.
    pub zero_map: bool,
}

/// Pixels whose drop is at least `factor · max`.
pub fn select_hotspots(pred: &Grid, factor: f64) -> Result<HotspotSet> {
    if pred.data.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidParameter(format!("hotspot factor {factor} outside (0, 1]")));
    }
    let dr_max = pred.max();
    if !dr_max.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    if dr_max <= 0.0 {
        return Ok(HotspotSet {
            pixels: Vec::new(),
            dr_max,
            dr_th: 0.0,
            zero_map: true,
        });
    }
    let dr_th = factor * dr_max;
    let pixels = (0..pred.height)
        .flat_map(|r| (0..pred.width).map(move |c| (r, c)))
        .filter(|&(r, c)| pred.get(r, c) >= dr_th)
        .collect();
    Ok(HotspotSet {
        pixels,
        dr_max,
        dr_th,
        zero_map: false,
    })
}

/// Number of pixels at or above `threshold`.
pub fn count_at_least(map: &Grid, threshold: f64) -> usize {
    map.data.iter().filter(|&&v| v >= threshold).count()
}

/// Averaged input gradient over a hotspot set.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major signed gradients.
    pub signed: Vec<f64>,
    pub hotspots: HotspotSet,
}

impl SaliencyStack {
    pub fn magnitude(&self) -> Vec<f64> {
        self.signed.iter().map(|v| v.abs()).collect()
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.signed[channel * p..(channel + 1) * p]
    }
}

/// `S = (1/K) Σ_k ∂F_k/∂X` over the hotspot pixels, from one backward pass.
pub fn saliency<M: Differentiable + ?Sized>(model: &M, stack: &FeatureStack, hotspots: &HotspotSet) -> Result<SaliencyStack> {
    if hotspots.pixels.is_empty() {
        return Err(Error::EmptyHotspots);
    }
    let signed = model.mean_gradient(stack, &hotspots.pixels)?;
    Ok(SaliencyStack {
        channels: signed.len() / (stack.height * stack.width),
        height: stack.height,
        width: stack.width,
        signed,
        hotspots: hotspots.clone(),
    })
}

/// The input image judged most responsible for the hotspots.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct Contributor {
    pub channel: usize,
    /// Top-K pixels of that channel by saliency magnitude.
    pub pixels: Vec<(usize, usize)>,
    /// `(channel, mean of its top-K magnitudes)` for every candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Channels of the nine resistance images.
pub fn resistance_channels() -> Vec<usize> {
    (RESISTANCE_OFFSET..RESISTANCE_OFFSET + Layer::ALL.len()).collect()
}

fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Largest first, earlier (row-major) index on ties.
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Scores each candidate channel by the mean of its `k` largest saliency
/// magnitudes and returns the best one (lowest index on ties) with its top
/// `k` pixels.
///
/// Pixels where `stack` is zero in that channel carry no wire, so there is
/// nothing to upsize there; they count as zero saliency.
pub fn rank_contributors(sal: &SaliencyStack, stack: &FeatureStack, k: usize, channels: &[usize]) -> Result<Contributor> {
    let p = sal.height * sal.width;
    if channels.is_empty() {
        return Err(Error::InvalidParameter("no candidate channels".into()));
    }
    if k > p {
        return Err(Error::InvalidParameter(format!("K = {k} exceeds {p} pixels per channel")));
    }
    if stack.height != sal.height || stack.width != sal.width {
        return Err(Error::Shape(format!(
            "saliency is {}x{}, stack {}x{}",
            sal.height, sal.width, stack.height, stack.width
        )));
    }
    let mut sorted: Vec<usize> = channels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for &ch in &sorted {
        if ch >= sal.channels {
            return Err(Error::InvalidParameter(format!("channel {ch} out of range")));
        }
        let mag: Vec<f64> = sal
            .plane(ch)
            .iter()
            .zip(stack.plane(ch))
            .map(|(v, x)| if *x > 0.0 { v.abs() } else { 0.0 })
            .collect();
        let top = top_k_indices(&mag, k);
        let score = if k == 0 { 0.0 } else { top.iter().map(|&i| mag[i]).sum::<f64>() / k as f64 };
        scores.push((ch, score));
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((ch, score, top));
        }
    }
    let (channel, _, top) = best.unwrap();
    Ok(Contributor {
        channel,
        pixels: top.into_iter().map(|i| (i / sal.width, i % sal.width)).collect(),
        scores,
    })
}

/// Scales the listed pixels of one channel by `1 − fraction`.
pub fn apply_upsize(stack: &FeatureStack, channel: usize, pixels: &[(usize, usize)], fraction: f64) -> Result<FeatureStack> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("fraction {fraction} outside (0, 1)")));
    }
    let channels = stack.data.len() / (stack.height * stack.width);
    if channel >= channels {
        return Err(Error::InvalidParameter(format!("channel {channel} out of range")));
    }
    let mut out = stack.clone();
    let w = stack.width;
    let keep = (1.0 - fraction) as f32;
    let plane = out.plane_mut(channel);
    for &(r, c) in pixels {
        if r >= stack.height || c >= w {
            return Err(Error::Shape(format!("pixel ({r}, {c}) outside {}x{w}", stack.height)));
        }
        plane[r * w + c] *= keep;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOptions {
    pub factor: f64,
    pub fraction: f64,
    /// Channels eligible for upsizing.
    pub channels: Vec<usize>,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            factor: 0.9,
            fraction: 0.1,
            channels: resistance_channels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct OptimizationReport {
    /// Channel whose pixels were reduced; `None` when nothing changed or
    /// when every resistance channel was touched.
    pub contributor_channel: Option<usize>,
    pub contributor_name: Option<String>,
    pub chosen_pixels: Vec<(usize, usize)>,
    pub dr_max: f64,
    pub dr_th: f64,
    pub high_drop_before: usize,
    pub high_drop_after: usize,
    pub reduction_percent: f64,
}

fn report(
    hot: &HotspotSet,
    channel: Option<usize>,
    pixels: Vec<(usize, usize)>,
    after: usize,
) -> OptimizationReport {
    let before = hot.pixels.len();
    OptimizationReport {
        contributor_channel: channel,
        contributor_name: channel.map(|c| String::from(CHANNEL_NAMES[c])),
        chosen_pixels: pixels,
        dr_max: hot.dr_max,
        dr_th: hot.dr_th,
        high_drop_before: before,
        high_drop_after: after,
        reduction_percent: if before == 0 {
            0.0
        } else {
            100.0 * (before as f64 - after as f64) / before as f64
        },
    }
}

/// Hotspots → saliency → top contributor → reduce its top-`k` pixels →
/// predict again → recount against the original threshold.
pub fn optimize<M: Differentiable + ?Sized>(model: &M, stack: &FeatureStack, k: usize, opts: &ExplainOptions) -> Result<OptimizationReport> {
    let hot = select_hotspots(&model.predict(stack)?, opts.factor)?;
    if hot.pixels.is_empty() {
        return Err(Error::EmptyHotspots);
    }
    if k == 0 {
        return Ok(report(&hot, None, Vec::new(), hot.pixels.len()));
    }
    let sal = saliency(model, stack, &hot)?;
    let best = rank_contributors(&sal, stack, k, &opts.channels)?;
    let next = apply_upsize(stack, best.channel, &best.pixels, opts.fraction)?;
    let after = count_at_least(&model.predict(&next)?, hot.dr_th);
    Ok(report(&hot, Some(best.channel), best.pixels, after))
}

/// Reduces every resistance channel at the hotspot locations, without
/// saliency, and recounts against the original threshold.
pub fn baseline_no_saliency<M: Differentiable + ?Sized>(model: &M, stack: &FeatureStack, opts: &ExplainOptions) -> Result<OptimizationReport> {
    let hot = select_hotspots(&model.predict(stack)?, opts.factor)?;
    if hot.pixels.is_empty() {
        return Ok(report(&hot, None, Vec::new(), 0));
    }
    let mut next = stack.clone();
    for ch in resistance_channels() {
        next = apply_upsize(&next, ch, &hot.pixels, opts.fraction)?;
    }
    let after = count_at_least(&model.predict(&next)?, hot.dr_th);
    Ok(report(&hot, None, hot.pixels.clone(), after))
}
