//! Image-based model inputs derived from a PDN netlist.
//!
//! Twelve single-channel rasters at 1 µm per pixel: current, PDN density,
//! effective pad distance, then one lumped-resistance image per layer in
//! [`Layer::ALL`] order. Rasters are resized to the model resolution and each
//! channel is scaled into `[0, 1]` by its own maximum.
//!
//! Pixel `(row, col)` covers `[col, col+1) × [row, row+1)` in micrometers, so a
//! node at `(x, y)` falls in pixel `(y, x)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{Grid, IrDropMap, Transform};
use crate::netlist::{CurrentSource, Layer, NodeId, PdnNetlist, ResistorEdge, VoltagePad};

pub const CHANNELS: usize = 12;
/// Index of the first resistance channel; the nine that follow are in
/// [`Layer::ALL`] order.
pub const RESISTANCE_OFFSET: usize = 3;

pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "current",
    "pdn_density",
    "effective_distance",
    "R_M1",
    "R_M4",
    "R_M7",
    "R_M8",
    "R_M9",
    "R_M14",
    "R_M47",
    "R_M78",
    "R_M89",
];

pub const CHANNEL_UNITS: [&str; CHANNELS] = [
    "A",
    "stripes/um^2",
    "1/um",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
    "ohm",
];

/// Closest distance used in the effective-distance sum (half a pixel).
pub const MIN_PAD_DISTANCE: f64 = 0.5;

/// Channel index of a layer's resistance image.
pub fn resistance_channel(layer: Layer) -> usize {
    RESISTANCE_OFFSET + layer.index()
}

/// Unnormalized rasters at die resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImageStack {
    pub images: Vec<Grid>,
}

impl RawImageStack {
    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }
}

/// Normalized `CHANNELS × height × width` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub height: usize,
    pub width: usize,
    /// Channel-major, each plane row-major, every entry in `[0, 1]`.
    pub data: Vec<f32>,
    /// Per-channel divisor; 1 for an all-zero channel.
    pub scales: Vec<f64>,
    /// Die raster size before resizing, `(height, width)`.
    pub original_dims: (usize, usize),
}

impl FeatureStack {
    pub fn plane(&self, channel: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[channel * p..(channel + 1) * p]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let p = self.height * self.width;
        &mut self.data[channel * p..(channel + 1) * p]
    }

    /// One channel back in physical units.
    pub fn denormalized(&self, channel: usize) -> Grid {
        let s = self.scales[channel];
        Grid::from_vec(
            self.height,
            self.width,
            self.plane(channel).iter().map(|&v| v as f64 * s).collect(),
        )
    }

    pub fn transformed(&self, t: Transform) -> FeatureStack {
        let (data, h, w) = t.apply_planes(&self.data, self.height, self.width);
        let (oh, ow) = t.dims(self.original_dims.0, self.original_dims.1);
        FeatureStack {
            height: h,
            width: w,
            data,
            scales: self.scales.clone(),
            original_dims: (oh, ow),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Provenance {
    Synthetic,
    Real,
    Augmented { transform: Transform, parent: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub id: String,
    pub features: FeatureStack,
    pub ground_truth: Option<IrDropMap>,
    pub provenance: Provenance,
}

fn die_dims(net: &PdnNetlist) -> (usize, usize) {
    (net.die_height as usize, net.die_width as usize)
}

fn pixel_of(n: &NodeId, dims: (usize, usize)) -> Option<(usize, usize)> {
    let (r, c) = (n.y as usize, n.x as usize);
    (r < dims.0 && c < dims.1).then_some((r, c))
}

/// Sum of source currents per pixel.
pub fn current_map(net: &PdnNetlist, dims: (usize, usize)) -> Grid {
    let mut g = Grid::zeros(dims.0, dims.1);
    for s in &net.sources {
        if let Some((r, c)) = pixel_of(&s.node, dims) {
            g.add(r, c, s.current);
        }
    }
    g
}

/// `Σ 1/dᵢ` over all pads, with distances between pixel centers floored at
/// [`MIN_PAD_DISTANCE`].
pub fn effective_distance_map(net: &PdnNetlist, dims: (usize, usize)) -> Result<Grid> {
    if net.pads.is_empty() {
        return Err(Error::InvalidNetlist("effective distance needs at least one pad".into()));
    }
    let pads: Vec<(f64, f64)> = net
        .pads
        .iter()
        .map(|p| (p.node.y as f64, p.node.x as f64))
        .collect();
    let mut g = Grid::zeros(dims.0, dims.1);
    for r in 0..dims.0 {
        for c in 0..dims.1 {
            let v: f64 = pads
                .iter()
                .map(|&(pr, pc)| {
                    let d = ((r as f64 - pr).powi(2) + (c as f64 - pc).powi(2)).sqrt();
                    1.0 / d.max(MIN_PAD_DISTANCE)
                })
                .sum();
            g.set(r, c, v);
        }
    }
    Ok(g)
}

/// Splits segment `a → b` (continuous µm coordinates) into per-pixel pieces,
/// reporting `(row, col, length_fraction)`. Zero-length segments report the
/// whole weight for the pixel containing the point.
fn segment_cells(a: (f64, f64), b: (f64, f64), dims: (usize, usize), mut f: impl FnMut(usize, usize, f64)) {
    let clamp = |v: f64, n: usize| -> usize {
        if v <= 0.0 {
            0
        } else {
            (v.floor() as usize).min(n - 1)
        }
    };
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    if dx == 0.0 && dy == 0.0 {
        f(clamp(a.1, dims.0), clamp(a.0, dims.1), 1.0);
        return;
    }
    // Parameters where the segment crosses integer grid lines.
    let mut ts = vec![0.0, 1.0];
    for (d, start) in [(dx, a.0), (dy, a.1)] {
        if d != 0.0 {
            let (lo, hi) = if d > 0.0 { (start, start + d) } else { (start + d, start) };
            let mut k = lo.floor() + 1.0;
            while k < hi {
                ts.push((k - start) / d);
                k += 1.0;
            }
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for w in ts.windows(2) {
        let frac = w[1] - w[0];
        if frac <= 0.0 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let (mx, my) = (a.0 + tm * dx, a.1 + tm * dy);
        f(clamp(my, dims.0), clamp(mx, dims.1), frac);
    }
}

fn node_point(n: &NodeId) -> (f64, f64) {
    (n.x as f64, n.y as f64)
}

/// One lumped-resistance raster per layer, in [`Layer::ALL`] order. Each
/// edge spreads its resistance over the pixels it crosses in proportion to
/// the length inside each; a via lands entirely in its pixel.
pub fn layer_resistance_maps(net: &PdnNetlist, dims: (usize, usize)) -> Vec<Grid> {
    let mut maps = vec![Grid::zeros(dims.0, dims.1); Layer::ALL.len()];
    for e in &net.edges {
        let Some(layer) = e.layer() else { continue };
        let g = &mut maps[layer.index()];
        let r = e.resistance;
        segment_cells(node_point(&e.a), node_point(&e.b), dims, |row, col, frac| {
            g.add(row, col, r * frac)
        });
    }
    maps
}

/// Stripe count per pixel over all metal layers. A stripe is a maximal run
/// of collinear axis-aligned edges on one layer that chain end to end; it
/// covers every pixel from its first node to its last. Skewed edges count as
/// stripes of their own.
pub fn pdn_density_map(net: &PdnNetlist, dims: (usize, usize)) -> Grid {
    // (layer, horizontal?, fixed coordinate) -> intervals along the line
    let mut lines: BTreeMap<(Layer, bool, u32), Vec<(u32, u32)>> = BTreeMap::new();
    let mut g = Grid::zeros(dims.0, dims.1);
    for e in &net.edges {
        let Some(layer) = e.layer() else { continue };
        if layer.is_via() || e.a.layer != e.b.layer {
            continue;
        }
        let (a, b) = (e.a, e.b);
        if a.y == b.y {
            lines.entry((layer, true, a.y)).or_default().push((a.x.min(b.x), a.x.max(b.x)));
        } else if a.x == b.x {
            lines.entry((layer, false, a.x)).or_default().push((a.y.min(b.y), a.y.max(b.y)));
        } else {
            let mut cells: Vec<(usize, usize)> = Vec::new();
            segment_cells(node_point(&a), node_point(&b), dims, |r, c, _| cells.push((r, c)));
            for p in [a, b] {
                if let Some(rc) = pixel_of(&p, dims) {
                    cells.push(rc);
                }
            }
            cells.sort_unstable();
            cells.dedup();
            for (r, c) in cells {
                g.add(r, c, 1.0);
            }
        }
    }
    for ((_, horizontal, fixed), mut spans) in lines {
        spans.sort_unstable();
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for (lo, hi) in spans {
            match runs.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => runs.push((lo, hi)),
            }
        }
        for (lo, hi) in runs {
            for t in lo..=hi {
                let (r, c) = if horizontal { (fixed, t) } else { (t, fixed) };
                if (r as usize) < dims.0 && (c as usize) < dims.1 {
                    g.add(r as usize, c as usize, 1.0);
                }
            }
        }
    }
    g
}

/// All twelve rasters at die resolution.
pub fn raw_stack(net: &PdnNetlist) -> Result<RawImageStack> {
    let dims = die_dims(net);
    let mut images = Vec::with_capacity(CHANNELS);
    images.push(current_map(net, dims));
    images.push(pdn_density_map(net, dims));
    images.push(effective_distance_map(net, dims)?);
    images.extend(layer_resistance_maps(net, dims));
    Ok(RawImageStack { images })
}

/// Per-axis resampling taps: for each output index, `(input index, weight)`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    if n_in == n_out {
        return (0..n_out).map(|i| vec![(i, 1.0)]).collect();
    }
    if n_out < n_in {
        // Area average over the output pixel's footprint.
        let s = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let (lo, hi) = (j as f64 * s, (j + 1) as f64 * s);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / s));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    } else {
        // Bilinear with half-pixel centers.
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let t = src - i0 as f64;
                if i0 == i1 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect()
    }
}

/// Resizes to `out_h × out_w`. Upscaling is bilinear; downscaling averages
/// the covered input area, which acts as the anti-aliasing prefilter. Axes
/// whose size is unchanged are copied untouched.
pub fn resize(grid: &Grid, out_h: usize, out_w: usize) -> Grid {
    assert!(grid.height >= 1 && grid.width >= 1 && out_h >= 1 && out_w >= 1);
    if (grid.height, grid.width) == (out_h, out_w) {
        return grid.clone();
    }
    let col_taps = axis_taps(grid.width, out_w);
    let row_taps = axis_taps(grid.height, out_h);
    let mut tmp = Grid::zeros(grid.height, out_w);
    for r in 0..grid.height {
        let src = &grid.data[r * grid.width..(r + 1) * grid.width];
        for (c, taps) in col_taps.iter().enumerate() {
            tmp.set(r, c, taps.iter().map(|&(i, w)| src[i] * w).sum());
        }
    }
    let mut out = Grid::zeros(out_h, out_w);
    for (r, taps) in row_taps.iter().enumerate() {
        for c in 0..out_w {
            out.set(r, c, taps.iter().map(|&(i, w)| tmp.get(i, c) * w).sum());
        }
    }
    out
}

/// Scales each channel by its own maximum. `original_dims` records the die
/// raster size the stack was resized from.
pub fn normalize(raw: &RawImageStack, original_dims: (usize, usize)) -> FeatureStack {
    let (h, w) = raw.dims();
    let mut data = Vec::with_capacity(raw.images.len() * h * w);
    let mut scales = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let m = img.max();
        let scale = if m > 0.0 && m.is_finite() { m } else { 1.0 };
        scales.push(scale);
        data.extend(img.data.iter().map(|&v| (v / scale) as f32));
    }
    FeatureStack {
        height: h,
        width: w,
        data,
        scales,
        original_dims,
    }
}

/// Netlist → normalized `CHANNELS × size × size` stack.
pub fn featurize(net: &PdnNetlist, size: usize) -> Result<FeatureStack> {
    let raw = raw_stack(net)?;
    let dims = raw.dims();
    let resized = RawImageStack {
        images: raw.images.iter().map(|g| resize(g, size, size)).collect(),
    };
    Ok(normalize(&resized, dims))
}

/// The six-fold augmentation set. Every transform is applied to all feature
/// channels and the ground truth alike.
pub fn augment(tc: &TestCase) -> Result<Vec<TestCase>> {
    let truth = tc
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("test case {} has no ground truth", tc.id)))?;
    Ok(Transform::ALL
        .iter()
        .map(|&t| TestCase {
            id: format!("{}_{}", tc.id, t.name()),
            features: tc.features.transformed(t),
            ground_truth: Some(IrDropMap {
                drop: truth.drop.transformed(t),
                source: truth.source,
            }),
            provenance: Provenance::Augmented {
                transform: t,
                parent: tc.id.clone(),
            },
        })
        .collect())
}

/// Applies a raster transform to node coordinates so that the netlist's drop
/// map transforms the same way.
pub fn transform_netlist(net: &PdnNetlist, t: Transform) -> PdnNetlist {
    let (h, w) = die_dims(net);
    let (oh, ow) = t.dims(h, w);
    let node = |n: NodeId| {
        let (r, c) = t.map(n.y as usize, n.x as usize, h, w);
        NodeId::new(n.layer, c as u32, r as u32)
    };
    PdnNetlist {
        die_width: ow as u32,
        die_height: oh as u32,
        edges: net
            .edges
            .iter()
            .map(|e| ResistorEdge {
                a: node(e.a),
                b: node(e.b),
                resistance: e.resistance,
            })
            .collect(),
        sources: net
            .sources
            .iter()
            .map(|s| CurrentSource {
                node: node(s.node),
                current: s.current,
            })
            .collect(),
        pads: net
            .pads
            .iter()
            .map(|p| VoltagePad {
                node: node(p.node),
                voltage: p.voltage,
            })
            .collect(),
    }
}
