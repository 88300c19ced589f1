//! Attention-gated U-Net mapping a 12-channel feature stack to a drop map.
//!
//! Layout: a depthwise 2×2 PreConv with ReLU, four encoder levels of two
//! 3×3 conv + batch-norm + ReLU layers each followed by 2×2 max pooling, a
//! bottleneck of the same form, and four decoder levels. Each decoder level
//! gates the matching encoder features with an additive attention gate driven
//! by the deeper decoder features, doubles the deeper features (interpolation
//! then 3×3 conv + BN + ReLU), concatenates both and applies two more conv
//! layers. A final 1×1 convolution yields the map; inference clamps it at 0.
//!
//! Parameters live in one flat vector described by a named layout, with the
//! batch-norm running statistics in a separate buffer vector.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, Real, Tensor, UpsampleMode};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, rename_all = "camelCase"))]
pub struct AttUNetConfig {
    pub input_channels: usize,
    /// PreConv kernel edge; only 2 is supported.
    pub preconv_kernel: usize,
    pub encoder_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub kernel_size: usize,
    /// Intermediate gate channels per level, shallowest first. Empty means
    /// half the gated channel count.
    pub attention_channels: Vec<usize>,
    /// Dropout rates: bottleneck first, then decoder levels deepest to
    /// shallowest.
    pub dropout: Vec<f64>,
    pub upsample: UpsampleMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for AttUNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 12,
            preconv_kernel: 2,
            encoder_filters: vec![32, 64, 128, 256],
            bottleneck_filters: 512,
            kernel_size: 3,
            attention_channels: Vec::new(),
            dropout: vec![0.5, 0.45, 0.4, 0.35, 0.3],
            upsample: UpsampleMode::Bilinear,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl AttUNetConfig {
    /// Same topology with every filter count divided by `factor`.
    pub fn narrowed(factor: usize) -> Self {
        let d = Self::default();
        Self {
            encoder_filters: d.encoder_filters.iter().map(|f| (f / factor).max(1)).collect(),
            bottleneck_filters: (d.bottleneck_filters / factor).max(1),
            ..d
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Gate intermediate channels for encoder level `level`.
    pub fn gate_channels(&self, level: usize) -> usize {
        self.attention_channels
            .get(level)
            .copied()
            .unwrap_or((self.encoder_filters[level] / 2).max(1))
    }

    /// Dropout schedule spanning `min` at the shallowest decoder level to
    /// `max` at the bottleneck.
    pub fn dropout_schedule(depth: usize, min: f64, max: f64) -> Vec<f64> {
        (0..=depth)
            .map(|i| if depth == 0 { max } else { max - (max - min) * i as f64 / depth as f64 })
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.input_channels == 0 {
            return bad("input channels must be positive");
        }
        if self.preconv_kernel != 2 {
            return bad("only a 2x2 PreConv kernel is supported");
        }
        if self.encoder_filters.is_empty() || self.encoder_filters.contains(&0) || self.bottleneck_filters == 0 {
            return bad("filter counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !self.attention_channels.is_empty()
            && (self.attention_channels.len() != self.depth() || self.attention_channels.contains(&0))
        {
            return bad("attention channels need one positive entry per level");
        }
        self.check_dropout(&self.dropout)?;
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]");
        }
        Ok(())
    }

    fn check_dropout(&self, rates: &[f64]) -> Result<()> {
        if rates.len() != self.depth() + 1 || rates.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::InvalidParameter(format!(
                "dropout needs {} rates in [0, 1)",
                self.depth() + 1
            )));
        }
        Ok(())
    }
}

/// A named slice of the flat parameter or buffer vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name, shape, offset };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvL {
    w: usize,
    /// The bias, when present, directly follows the weights.
    bias: bool,
    shape: ConvShape,
}

#[derive(Debug, Clone, Copy)]
struct BnL {
    /// gamma then beta.
    gamma: usize,
    mean: usize,
    var: usize,
    c: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: ConvL,
    bn: BnL,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    a: ConvBn,
    b: ConvBn,
}

/// Offsets of one attention gate inside a flat parameter vector. Stored
/// contiguously as `w_x [cl,cx]`, `w_g [cl,cg]`, `b_g [cl]`, `phi [1,cl]`,
/// `b_phi [1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateLayout {
    pub offset: usize,
    pub cx: usize,
    pub cg: usize,
    pub cl: usize,
}

impl GateLayout {
    pub fn len(&self) -> usize {
        self.cl * (self.cx + self.cg + 2) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn w_x(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.cl * self.cx
    }
    fn w_g(&self) -> core::ops::Range<usize> {
        let s = self.w_x().end;
        s..s + self.cl * self.cg
    }
    /// `w_g` and `b_g` together.
    fn w_g_b(&self) -> core::ops::Range<usize> {
        let s = self.w_x().end;
        s..s + self.cl * (self.cg + 1)
    }
    fn b_g(&self) -> core::ops::Range<usize> {
        let s = self.w_g().end;
        s..s + self.cl
    }
    /// `phi` and `b_phi` together.
    fn phi_b(&self) -> core::ops::Range<usize> {
        let s = self.b_g().end;
        s..s + self.cl + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderL {
    gate: GateLayout,
    up: ConvBn,
    block: DoubleConv,
}

#[derive(Debug, Clone)]
struct Net {
    /// PreConv weights `[c,2,2]` followed by biases `[c]`.
    pre: usize,
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Deepest level first.
    dec: Vec<DecoderL>,
    head: ConvL,
}

/// Forward-pass mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics and seeded dropout with the given rates (bottleneck
    /// first, then decoder levels deepest to shallowest).
    Train { dropout: Vec<f64>, seed: u64 },
}

struct CbrTape<T> {
    x: Tensor<T>,
    bn: nn::BnCache<T>,
}

struct DoubleTape<T> {
    a: CbrTape<T>,
    b: CbrTape<T>,
}

/// Saved activations of an attention gate.
pub struct GateTape<T> {
    x: Tensor<T>,
    g: Tensor<T>,
    f: Tensor<T>,
    /// Attention coefficients, one channel.
    pub alpha: Tensor<T>,
}

struct DecTape<T> {
    gate: GateTape<T>,
    up: CbrTape<T>,
    block: DoubleTape<T>,
    mask: Option<Vec<T>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    train: bool,
    input: Tensor<T>,
    pre_out: Tensor<T>,
    enc: Vec<DoubleTape<T>>,
    pools: Vec<Vec<u32>>,
    bottleneck: DoubleTape<T>,
    bottleneck_mask: Option<Vec<T>>,
    dec: Vec<DecTape<T>>,
    head_in: Tensor<T>,
}

impl<T> Tape<T> {
    /// Attention maps, one per gate, deepest first.
    pub fn attention(&self) -> Vec<&Tensor<T>> {
        self.dec.iter().map(|d| &d.gate.alpha).collect()
    }
}

/// The network: configuration, layout and values.
#[derive(Debug, Clone)]
pub struct AttUNet<T> {
    pub config: AttUNetConfig,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
    param_specs: Vec<ParamSpec>,
    buffer_specs: Vec<ParamSpec>,
    net: Net,
}

fn conv_layer(lb: &mut LayoutBuilder, name: &str, s: ConvShape, bias: bool) -> ConvL {
    let w = lb.push(format!("{name}.weight"), vec![s.cout, s.cin, s.k, s.k]);
    if bias {
        lb.push(format!("{name}.bias"), vec![s.cout]);
    }
    ConvL { w, bias, shape: s }
}

fn bn_layer(lb: &mut LayoutBuilder, bufs: &mut LayoutBuilder, name: &str, c: usize) -> BnL {
    let gamma = lb.push(format!("{name}.gamma"), vec![c]);
    lb.push(format!("{name}.beta"), vec![c]);
    let mean = bufs.push(format!("{name}.running_mean"), vec![c]);
    let var = bufs.push(format!("{name}.running_var"), vec![c]);
    BnL { gamma, mean, var, c }
}

fn conv_bn(lb: &mut LayoutBuilder, bufs: &mut LayoutBuilder, name: &str, s: ConvShape) -> ConvBn {
    ConvBn {
        conv: conv_layer(lb, &format!("{name}.conv"), s, true),
        bn: bn_layer(lb, bufs, &format!("{name}.bn"), s.cout),
    }
}

fn double_conv(lb: &mut LayoutBuilder, bufs: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize) -> DoubleConv {
    DoubleConv {
        a: conv_bn(lb, bufs, &format!("{name}.0"), ConvShape { cin, cout, k }),
        b: conv_bn(lb, bufs, &format!("{name}.1"), ConvShape { cin: cout, cout, k }),
    }
}

fn gate_layer(lb: &mut LayoutBuilder, name: &str, cx: usize, cg: usize, cl: usize) -> GateLayout {
    let offset = lb.push(format!("{name}.w_x"), vec![cl, cx]);
    lb.push(format!("{name}.w_g"), vec![cl, cg]);
    lb.push(format!("{name}.b_g"), vec![cl]);
    lb.push(format!("{name}.phi"), vec![1, cl]);
    lb.push(format!("{name}.b_phi"), vec![1]);
    GateLayout { offset, cx, cg, cl }
}

fn build(config: &AttUNetConfig) -> (Net, Vec<ParamSpec>, Vec<ParamSpec>) {
    let mut lb = LayoutBuilder::default();
    let mut bufs = LayoutBuilder::default();
    let k = config.kernel_size;
    let c0 = config.input_channels;
    let pre = lb.push("preconv.weight".into(), vec![c0, 1, 2, 2]);
    lb.push("preconv.bias".into(), vec![c0]);
    let mut enc = Vec::new();
    let mut cin = c0;
    for (l, &f) in config.encoder_filters.iter().enumerate() {
        enc.push(double_conv(&mut lb, &mut bufs, &format!("encoder.{l}"), cin, f, k));
        cin = f;
    }
    let bottleneck = double_conv(&mut lb, &mut bufs, "bottleneck", cin, config.bottleneck_filters, k);
    let mut deeper = config.bottleneck_filters;
    let mut dec = Vec::new();
    for l in (0..config.depth()).rev() {
        let cx = config.encoder_filters[l];
        let name = format!("decoder.{l}");
        let gate = gate_layer(&mut lb, &format!("{name}.gate"), cx, deeper, config.gate_channels(l));
        let up = conv_bn(&mut lb, &mut bufs, &format!("{name}.up"), ConvShape { cin: deeper, cout: cx, k });
        let block = double_conv(&mut lb, &mut bufs, &format!("{name}.block"), 2 * cx, cx, k);
        dec.push(DecoderL { gate, up, block });
        deeper = cx;
    }
    let head = conv_layer(&mut lb, "head", ConvShape { cin: deeper, cout: 1, k: 1 }, true);
    (
        Net {
            pre,
            enc,
            bottleneck,
            dec,
            head,
        },
        lb.specs,
        bufs.specs,
    )
}

fn check_finite<T: Real>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation of {layer}")))
    }
}

/// Attention gate with separate `W_x` and `W_g` projections. `W_g` is
/// applied at the gate signal's resolution and the result upsampled
/// bilinearly; this equals projecting the upsampled signal because the
/// interpolation weights sum to one.
pub fn attention_gate<T: Real>(
    params: &[T],
    lay: &GateLayout,
    x: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, GateTape<T>)> {
    if x.c != lay.cx || g.c != lay.cg || g.h * 2 != x.h || g.w * 2 != x.w || g.n != x.n {
        return Err(Error::Shape(format!(
            "gate expects x {}x(2h)x(2w) and g {}xhxw, got {:?} and {:?}",
            lay.cx,
            lay.cg,
            x.shape(),
            g.shape()
        )));
    }
    let cl = lay.cl;
    let tx = nn::conv2d(x, &params[lay.w_x()], None, ConvShape { cin: lay.cx, cout: cl, k: 1 });
    let pg = nn::conv2d(
        g,
        &params[lay.w_g()],
        Some(&params[lay.b_g()]),
        ConvShape { cin: lay.cg, cout: cl, k: 1 },
    );
    let mut f = nn::upsample2(&pg, UpsampleMode::Bilinear);
    for (a, b) in f.data.iter_mut().zip(&tx.data) {
        *a = (*a + *b).max(T::zero());
    }
    let pb = &params[lay.phi_b()];
    let mut alpha = nn::conv2d(&f, &pb[..cl], Some(&pb[cl..]), ConvShape { cin: cl, cout: 1, k: 1 });
    alpha.data.iter_mut().for_each(|q| *q = nn::sigmoid(*q));
    let out = gate_apply(x, &alpha);
    Ok((
        out,
        GateTape {
            x: x.clone(),
            g: g.clone(),
            f,
            alpha,
        },
    ))
}

fn gate_apply<T: Real>(x: &Tensor<T>, alpha: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let p = x.hw();
    for i in 0..x.n {
        let a = alpha.plane(i, 0);
        for c in 0..x.c {
            out.plane_mut(i, c).iter_mut().zip(a).for_each(|(v, s)| *v *= *s);
        }
    }
    debug_assert_eq!(alpha.hw(), p);
    out
}

/// Attention coefficients computed with the single concatenated projection
/// `W = [W_x; W_g]` applied to `[x; up(g)]`.
pub fn attention_alpha_concat<T: Real>(params: &[T], lay: &GateLayout, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let cl = lay.cl;
    let (cx, cg) = (lay.cx, lay.cg);
    let wx = &params[lay.w_x()];
    let wg = &params[lay.w_g()];
    let mut w = Vec::with_capacity(cl * (cx + cg));
    for j in 0..cl {
        w.extend_from_slice(&wx[j * cx..(j + 1) * cx]);
        w.extend_from_slice(&wg[j * cg..(j + 1) * cg]);
    }
    let xg = nn::concat(x, &nn::upsample2(g, UpsampleMode::Bilinear));
    let mut f = nn::conv2d(&xg, &w, Some(&params[lay.b_g()]), ConvShape { cin: cx + cg, cout: cl, k: 1 });
    f.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let pb = &params[lay.phi_b()];
    let mut alpha = nn::conv2d(&f, &pb[..cl], Some(&pb[cl..]), ConvShape { cin: cl, cout: 1, k: 1 });
    alpha.data.iter_mut().for_each(|q| *q = nn::sigmoid(*q));
    alpha
}

/// Backward of [`attention_gate`]. Accumulates into `grads` (same layout as
/// `params`) and returns the gradients for `x` and `g`.
pub fn attention_gate_backward<T: Real>(
    params: &[T],
    lay: &GateLayout,
    tape: &GateTape<T>,
    dout: &Tensor<T>,
    grads: &mut [T],
) -> (Tensor<T>, Tensor<T>) {
    let cl = lay.cl;
    let x = &tape.x;
    let p = x.hw();
    let mut dx = gate_apply(dout, &tape.alpha);
    // dq = Σ_c dout·x · α(1−α)
    let mut dq = Tensor::zeros(x.n, 1, x.h, x.w);
    for i in 0..x.n {
        let dqp = dq.plane_mut(i, 0);
        for c in 0..x.c {
            let (gp, xp) = (dout.plane(i, c), x.plane(i, c));
            for k in 0..p {
                dqp[k] += gp[k] * xp[k];
            }
        }
        let a = tape.alpha.plane(i, 0);
        dqp.iter_mut().zip(a).for_each(|(d, &s)| *d *= s * (T::one() - s));
    }
    let pb = &params[lay.phi_b()];
    let (dphi, dbphi) = grads[lay.phi_b()].split_at_mut(cl);
    let mut df = nn::conv2d_backward(&tape.f, &pb[..cl], &dq, ConvShape { cin: cl, cout: 1, k: 1 }, dphi, Some(dbphi), true)
        .unwrap();
    for (d, &f) in df.data.iter_mut().zip(&tape.f.data) {
        if f <= T::zero() {
            *d = T::zero();
        }
    }
    let dx2 = nn::conv2d_backward(
        x,
        &params[lay.w_x()],
        &df,
        ConvShape { cin: lay.cx, cout: cl, k: 1 },
        &mut grads[lay.w_x()],
        None,
        true,
    )
    .unwrap();
    dx.add_assign(&dx2);
    let dpg = nn::upsample2_backward(&df, UpsampleMode::Bilinear);
    let (dwg, dbg) = grads[lay.w_g_b()].split_at_mut(cl * lay.cg);
    let dg = nn::conv2d_backward(
        &tape.g,
        &params[lay.w_g()],
        &dpg,
        ConvShape { cin: lay.cg, cout: cl, k: 1 },
        dwg,
        Some(dbg),
        true,
    )
    .unwrap();
    (dx, dg)
}

impl<T: Real> AttUNet<T> {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn new(config: AttUNetConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let (net, param_specs, buffer_specs) = build(&config);
        let total = param_specs.last().map_or(0, |s| s.offset + s.len());
        let mut params = vec![T::zero(); total];
        let mut rng = nn::rng(seed);
        for spec in &param_specs {
            let dst = &mut params[spec.offset..spec.offset + spec.len()];
            let leaf = spec.name.rsplit('.').next().unwrap_or("");
            match leaf {
                "weight" | "w_x" | "w_g" | "phi" => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let non_negative = spec.name.starts_with("preconv");
                    for v in dst {
                        let z: f64 = rng.sample(StandardNormal);
                        // Non-negative PreConv kernels keep every channel of
                        // a non-negative input alive through the ReLU.
                        *v = T::of(if non_negative { z.abs() } else { z } * std);
                    }
                }
                "gamma" => dst.fill(T::one()),
                _ => {}
            }
        }
        let btotal = buffer_specs.last().map_or(0, |s| s.offset + s.len());
        let mut buffers = vec![T::zero(); btotal];
        for spec in &buffer_specs {
            if spec.name.ends_with("running_var") {
                buffers[spec.offset..spec.offset + spec.len()].fill(T::one());
            }
        }
        Ok(Self {
            config,
            params,
            buffers,
            param_specs,
            buffer_specs,
            net,
        })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.param_specs
    }

    pub fn buffer_specs(&self) -> &[ParamSpec] {
        &self.buffer_specs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same network with values converted to another precision.
    pub fn cast<U: Real>(&self) -> AttUNet<U> {
        AttUNet {
            config: self.config.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
            buffers: self.buffers.iter().map(|v| U::of(v.as_f64())).collect(),
            param_specs: self.param_specs.clone(),
            buffer_specs: self.buffer_specs.clone(),
            net: self.net.clone(),
        }
    }

    /// Layout of the `index`-th gate (deepest first) in [`Self::params`].
    pub fn gate_layout(&self, index: usize) -> GateLayout {
        self.net.dec[index].gate
    }

    /// Output shape of every block for an `h × w` input, as
    /// `(name, [channels, height, width])`.
    pub fn activation_shapes(&self, h: usize, w: usize) -> Vec<(String, [usize; 3])> {
        let c = &self.config;
        let mut out = vec![(String::from("preconv"), [c.input_channels, h, w])];
        let (mut hh, mut ww) = (h, w);
        for (l, &f) in c.encoder_filters.iter().enumerate() {
            out.push((format!("encoder.{l}"), [f, hh, ww]));
            hh /= 2;
            ww /= 2;
        }
        out.push(("bottleneck".into(), [c.bottleneck_filters, hh, ww]));
        for l in (0..c.depth()).rev() {
            hh *= 2;
            ww *= 2;
            out.push((format!("decoder.{l}.gate"), [1, hh, ww]));
            out.push((format!("decoder.{l}"), [c.encoder_filters[l], hh, ww]));
        }
        out.push(("head".into(), [1, hh, ww]));
        out
    }

    fn slice(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn conv(&self, l: &ConvL, x: &Tensor<T>) -> Tensor<T> {
        let n = l.shape.weights();
        let b = l.bias.then(|| self.slice(l.w + n, l.shape.cout));
        nn::conv2d(x, self.slice(l.w, n), b, l.shape)
    }

    fn conv_back(&self, l: &ConvL, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let n = l.shape.weights();
        let nb = if l.bias { l.shape.cout } else { 0 };
        let (dw, db) = grads[l.w..l.w + n + nb].split_at_mut(n);
        nn::conv2d_backward(x, self.slice(l.w, n), dy, l.shape, dw, l.bias.then_some(db), need_dx)
    }

    fn cbr(&self, l: &ConvBn, x: Tensor<T>, train: bool) -> (Tensor<T>, CbrTape<T>) {
        let c = self.conv(&l.conv, &x);
        let bn = &l.bn;
        let (y, cache) = nn::bn_relu(
            &c,
            self.slice(bn.gamma, bn.c),
            self.slice(bn.gamma + bn.c, bn.c),
            &self.buffers[bn.mean..bn.mean + bn.c],
            &self.buffers[bn.var..bn.var + bn.c],
            self.config.bn_eps,
            train,
        );
        (y, CbrTape { x, bn: cache })
    }

    fn cbr_back(&self, l: &ConvBn, t: &CbrTape<T>, dy: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let bn = &l.bn;
        let (dg, db) = grads[bn.gamma..bn.gamma + 2 * bn.c].split_at_mut(bn.c);
        let dc = nn::bn_relu_backward(
            &t.bn,
            self.slice(bn.gamma, bn.c),
            self.slice(bn.gamma + bn.c, bn.c),
            dy,
            dg,
            db,
        );
        self.conv_back(&l.conv, &t.x, &dc, grads, need_dx)
    }

    fn double(&self, l: &DoubleConv, x: Tensor<T>, train: bool) -> (Tensor<T>, DoubleTape<T>) {
        let (m, a) = self.cbr(&l.a, x, train);
        let (y, b) = self.cbr(&l.b, m, train);
        (y, DoubleTape { a, b })
    }

    fn double_back(&self, l: &DoubleConv, t: &DoubleTape<T>, dy: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let dm = self.cbr_back(&l.b, &t.b, dy, grads, true).unwrap();
        self.cbr_back(&l.a, &t.a, &dm, grads, need_dx)
    }

    /// The PreConv stage alone: per-channel 2×2 convolution and ReLU.
    pub fn preconv(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c0 = self.config.input_channels;
        if x.c != c0 {
            return Err(Error::Shape(format!("expected {c0} input channels, got {}", x.c)));
        }
        let mut h = nn::depthwise2x2(x, self.slice(self.net.pre, 4 * c0), self.slice(self.net.pre + 4 * c0, c0));
        h.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        Ok(h)
    }

    /// Runs the network and returns the unclamped output with the tape.
    pub fn forward(&self, x: &Tensor<T>, mode: &Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let cfg = &self.config;
        let depth = cfg.depth();
        if x.c != cfg.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                cfg.input_channels, x.c
            )));
        }
        let unit = 1usize << depth;
        if x.h % unit != 0 || x.w % unit != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a positive multiple of {unit}",
                x.h, x.w
            )));
        }
        let (train, rates, mut rng) = match mode {
            Mode::Eval => (false, vec![0.0; depth + 1], None),
            Mode::Train { dropout, seed } => {
                cfg.check_dropout(dropout)?;
                (true, dropout.clone(), Some(nn::rng(*seed)))
            }
        };
        let mut mask_for = |t: &mut Tensor<T>, p: f64| -> Option<Vec<T>> {
            let rng = rng.as_mut()?;
            if p <= 0.0 {
                return None;
            }
            let m = nn::dropout_mask(t.data.len(), p, rng);
            nn::apply_mask(t, &m);
            Some(m)
        };

        let mut h = self.preconv(x)?;
        check_finite(&h, "preconv")?;
        let pre_out = h.clone();

        let mut enc = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for (l, layer) in self.net.enc.iter().enumerate() {
            let (s, t) = self.double(layer, h, train);
            check_finite(&s, &format!("encoder.{l}"))?;
            let (p, arg) = nn::maxpool2(&s);
            enc.push(t);
            pools.push(arg);
            skips.push(s);
            h = p;
        }
        let (mut d, bottleneck) = self.double(&self.net.bottleneck, h, train);
        let bottleneck_mask = mask_for(&mut d, rates[0]);
        check_finite(&d, "bottleneck")?;

        let mut dec = Vec::with_capacity(depth);
        for (j, layer) in self.net.dec.iter().enumerate() {
            let l = depth - 1 - j;
            let skip = skips.pop().unwrap();
            let (gated, gate) = attention_gate(&self.params, &layer.gate, &skip, &d)?;
            let (u, up) = self.cbr(&layer.up, nn::upsample2(&d, cfg.upsample), train);
            let (mut y, block) = self.double(&layer.block, nn::concat(&gated, &u), train);
            let mask = mask_for(&mut y, rates[j + 1]);
            check_finite(&y, &format!("decoder.{l}"))?;
            dec.push(DecTape { gate, up, block, mask });
            d = y;
        }
        let out = self.conv(&self.net.head, &d);
        check_finite(&out, "head")?;
        Ok((
            out,
            Tape {
                train,
                input: x.clone(),
                pre_out,
                enc,
                pools,
                bottleneck,
                bottleneck_mask,
                dec,
                head_in: d,
            },
        ))
    }

    /// Inference: eval mode with the output clamped at zero.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut y, _) = self.forward(x, &Mode::Eval)?;
        y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        Ok(y)
    }

    /// Backpropagates `dout` (gradient of the unclamped output) through the
    /// pass recorded in `tape`, accumulating into `grads`. Returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(&self, tape: &Tape<T>, dout: &Tensor<T>, grads: &mut [T], need_input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");
        let depth = self.config.depth();
        let mut dd = self.conv_back(&self.net.head, &tape.head_in, dout, grads, true).unwrap();
        let mut dskips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for (j, layer) in self.net.dec.iter().enumerate().rev() {
            let l = depth - 1 - j;
            let t = &tape.dec[j];
            if let Some(m) = &t.mask {
                nn::apply_mask(&mut dd, m);
            }
            let dcat = self.double_back(&layer.block, &t.block, &dd, grads, true).unwrap();
            let (dgated, du) = nn::split(&dcat, layer.gate.cx);
            let dup = self.cbr_back(&layer.up, &t.up, &du, grads, true).unwrap();
            let mut ddeep = nn::upsample2_backward(&dup, self.config.upsample);
            let (dskip, dg) = attention_gate_backward(&self.params, &layer.gate, &t.gate, &dgated, grads);
            ddeep.add_assign(&dg);
            dskips[l] = Some(dskip);
            dd = ddeep;
        }
        if let Some(m) = &tape.bottleneck_mask {
            nn::apply_mask(&mut dd, m);
        }
        let mut dh = self.double_back(&self.net.bottleneck, &tape.bottleneck, &dd, grads, true).unwrap();
        for (l, layer) in self.net.enc.iter().enumerate().rev() {
            let mut ds = nn::maxpool2_backward(&dh, &tape.pools[l]);
            ds.add_assign(dskips[l].as_ref().unwrap());
            dh = self.double_back(layer, &tape.enc[l], &ds, grads, true).unwrap();
        }
        // PreConv ReLU mask.
        for (d, &y) in dh.data.iter_mut().zip(&tape.pre_out.data) {
            if y <= T::zero() {
                *d = T::zero();
            }
        }
        let c0 = self.config.input_channels;
        let pre = self.net.pre;
        let (dw, db) = grads[pre..pre + 5 * c0].split_at_mut(4 * c0);
        nn::depthwise2x2_backward(&tape.input, self.slice(pre, 4 * c0), &dh, dw, db, need_input_grad)
    }

    /// Folds the batch statistics recorded in a training-mode tape into the
    /// running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        if !tape.train {
            return;
        }
        let mom = self.config.bn_momentum;
        let mut pairs: Vec<(BnL, &nn::BnCache<T>)> = Vec::new();
        let doubles = self
            .net
            .enc
            .iter()
            .zip(&tape.enc)
            .chain([(&self.net.bottleneck, &tape.bottleneck)])
            .chain(self.net.dec.iter().zip(&tape.dec).map(|(l, t)| (&l.block, &t.block)));
        for (l, t) in doubles {
            pairs.push((l.a.bn, &t.a.bn));
            pairs.push((l.b.bn, &t.b.bn));
        }
        for (l, t) in self.net.dec.iter().zip(&tape.dec) {
            pairs.push((l.up.bn, &t.up.bn));
        }
        for (bn, cache) in pairs {
            for c in 0..bn.c {
                let rm = &mut self.buffers[bn.mean + c];
                *rm = T::of((1.0 - mom) * rm.as_f64() + mom * cache.batch_mean[c]);
                let rv = &mut self.buffers[bn.var + c];
                *rv = T::of((1.0 - mom) * rv.as_f64() + mom * cache.batch_var[c]);
            }
        }
    }
}
