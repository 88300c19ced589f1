//! Parametric generator of artificial PDN test cases.
//!
//! Builds a five-metal stripe grid with vias at every crossing of adjacent
//! layers, drops supply pads on top-layer nodes, scatters load as a mixture
//! of Gaussian blobs over the M1 rail nodes plus a uniform floor, and solves
//! the result for its ground-truth drop map.

use alloc::format;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurize::{featurize, Provenance, TestCase};
use crate::netlist::{validate, CurrentSource, Layer, NodeId, PdnNetlist, ResistorEdge, VoltagePad};
use crate::solver;

/// Inclusive range.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: Copy> Span<T> {
    pub const fn fixed(v: T) -> Self {
        Self { min: v, max: v }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, rename_all = "camelCase"))]
pub struct SynthParams {
    pub seed: u64,
    /// Die width and height in µm, drawn independently.
    pub die_size: Span<u32>,
    /// Stripe pitch in µm for M1, M4, M7, M8, M9.
    pub layer_pitches: [u32; 5],
    /// Ω/µm for M1, M4, M7, M8, M9.
    pub unit_resistances: [f64; 5],
    /// Ω per via for M14, M47, M78, M89.
    pub via_resistances: [f64; 4],
    /// Relative strap width, drawn per stripe; a stripe's segment
    /// resistances are divided by it.
    pub strap_width: Span<f64>,
    pub pad_count: Span<u32>,
    pub blob_count: Span<u32>,
    /// Gaussian sigma of a load blob, µm.
    pub blob_spread: Span<f64>,
    /// Amperes.
    pub total_current: f64,
    /// Share of the total current spread uniformly over all M1 nodes.
    pub background_fraction: f64,
    /// Volts.
    pub supply_voltage: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            die_size: Span { min: 64, max: 256 },
            layer_pitches: [1, 8, 12, 16, 16],
            unit_resistances: [0.8, 0.2, 0.05, 0.03, 0.02],
            via_resistances: [2.0, 1.0, 0.5, 0.3],
            strap_width: Span::fixed(1.0),
            pad_count: Span { min: 2, max: 6 },
            blob_count: Span { min: 1, max: 4 },
            blob_spread: Span { min: 4.0, max: 16.0 },
            total_current: 0.05,
            background_fraction: 0.2,
            supply_voltage: 1.0,
        }
    }
}

impl SynthParams {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.die_size.min < 2 || self.die_size.min > self.die_size.max {
            return bad("die size range must satisfy 2 <= min <= max");
        }
        if self.layer_pitches.iter().any(|&p| p < 1 || p > self.die_size.min) {
            return bad("layer pitches must lie in 1..=minimum die size");
        }
        if self.pad_count.min < 1 || self.pad_count.min > self.pad_count.max {
            return bad("pad count must be at least 1");
        }
        if self.blob_count.min > self.blob_count.max {
            return bad("blob count range is empty");
        }
        if !(self.blob_spread.min > 0.0) || self.blob_spread.min > self.blob_spread.max {
            return bad("blob spread must be positive");
        }
        if !(self.total_current > 0.0) || !self.total_current.is_finite() {
            return bad("total current must be positive");
        }
        if !(0.0..=1.0).contains(&self.background_fraction)
            || (self.background_fraction == 0.0 && self.blob_count.min == 0)
        {
            return bad("background fraction must be in [0, 1] and some load must exist");
        }
        if self.unit_resistances.iter().chain(&self.via_resistances).any(|&r| !(r > 0.0)) {
            return bad("resistances must be positive");
        }
        if !(self.strap_width.min > 0.0) || self.strap_width.min > self.strap_width.max {
            return bad("strap width must be positive");
        }
        if !(self.supply_voltage > 0.0) {
            return bad("supply voltage must be positive");
        }
        Ok(())
    }
}

/// A generated case: the netlist plus its featurized, solved test case.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub netlist: PdnNetlist,
    pub case: TestCase,
}

/// Seed of the `index`-th case of a corpus (splitmix64 of the base seed).
pub fn case_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_u32(rng: &mut ChaCha8Rng, s: Span<u32>) -> u32 {
    rng.random_range(s.min..=s.max)
}

fn draw_f64(rng: &mut ChaCha8Rng, s: Span<f64>) -> f64 {
    if s.min == s.max {
        s.min
    } else {
        rng.random_range(s.min..=s.max)
    }
}

const HORIZONTAL: [bool; 5] = [true, false, true, false, true];

/// Builds the netlist for one seed without solving it.
pub fn build_netlist(params: &SynthParams, seed: u64) -> Result<PdnNetlist> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = draw_u32(&mut rng, params.die_size);
    let h = draw_u32(&mut rng, params.die_size);

    // Stripe coordinates per metal layer.
    let stripes: Vec<Vec<u32>> = (0..5)
        .map(|l| {
            let p = params.layer_pitches[l];
            let extent = if HORIZONTAL[l] { h } else { w };
            let offset = rng.random_range(0..p);
            (0..).map(|k| offset + k * p).take_while(|&c| c < extent).collect()
        })
        .collect();

    let widths: Vec<Vec<f64>> = stripes
        .iter()
        .map(|layer| layer.iter().map(|_| draw_f64(&mut rng, params.strap_width)).collect())
        .collect();

    // Node positions along each stripe: crossings with the adjacent layers,
    // and every micrometer on M1.
    let mut edges = Vec::new();
    for l in 0..5 {
        let layer = Layer::METALS[l];
        let mut cross: Vec<u32> = Vec::new();
        for adj in [l.wrapping_sub(1), l + 1] {
            if adj < 5 {
                cross.extend(&stripes[adj]);
            }
        }
        if l == 0 {
            cross = (0..w).collect();
        }
        cross.sort_unstable();
        cross.dedup();
        for (&s, &width) in stripes[l].iter().zip(&widths[l]) {
            for pair in cross.windows(2) {
                let (t0, t1) = (pair[0], pair[1]);
                let (a, b) = if HORIZONTAL[l] {
                    (NodeId::new(layer, t0, s), NodeId::new(layer, t1, s))
                } else {
                    (NodeId::new(layer, s, t0), NodeId::new(layer, s, t1))
                };
                edges.push(ResistorEdge {
                    a,
                    b,
                    resistance: params.unit_resistances[l] * (t1 - t0) as f64 / width,
                });
            }
        }
    }
    for (v, via) in Layer::VIAS.iter().enumerate() {
        let (lo, hi) = via.via_metals().unwrap();
        let (rows, cols) = if HORIZONTAL[v] {
            (&stripes[v], &stripes[v + 1])
        } else {
            (&stripes[v + 1], &stripes[v])
        };
        for &y in rows {
            for &x in cols {
                edges.push(ResistorEdge {
                    a: NodeId::new(lo, x, y),
                    b: NodeId::new(hi, x, y),
                    resistance: params.via_resistances[v],
                });
            }
        }
    }

    // Pads on top-layer nodes.
    let mut top: Vec<NodeId> = Vec::new();
    for e in &edges {
        for n in [e.a, e.b] {
            if n.layer == Layer::M9 {
                top.push(n);
            }
        }
    }
    top.sort_unstable();
    top.dedup();
    if top.is_empty() {
        return Err(Error::InvalidParameter("top layer has no nodes".into()));
    }
    let pad_count = (draw_u32(&mut rng, params.pad_count) as usize).min(top.len());
    let mut pad_idx = sample(&mut rng, top.len(), pad_count).into_vec();
    pad_idx.sort_unstable();
    let pads = pad_idx
        .into_iter()
        .map(|i| VoltagePad {
            node: top[i],
            voltage: params.supply_voltage,
        })
        .collect();

    // Load.
    let rails = &stripes[0];
    let blobs: Vec<(f64, f64, f64, f64)> = (0..draw_u32(&mut rng, params.blob_count))
        .map(|_| {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let sigma = draw_f64(&mut rng, params.blob_spread);
            let amp = rng.random_range(0.5..1.5);
            (cx, cy, sigma, amp)
        })
        .collect();
    let m1_nodes: Vec<NodeId> = rails
        .iter()
        .flat_map(|&y| (0..w).map(move |x| NodeId::new(Layer::M1, x, y)))
        .collect();
    let weights: Vec<f64> = m1_nodes
        .iter()
        .map(|n| {
            blobs
                .iter()
                .map(|&(cx, cy, s, a)| {
                    let d2 = (n.x as f64 - cx).powi(2) + (n.y as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .collect();
    let blob_total: f64 = weights.iter().sum();
    let (bg, blob_share) = if blob_total > 0.0 {
        (params.background_fraction, 1.0 - params.background_fraction)
    } else {
        (1.0, 0.0)
    };
    let floor = params.total_current * bg / m1_nodes.len() as f64;
    let mut sources: Vec<CurrentSource> = m1_nodes
        .iter()
        .zip(&weights)
        .map(|(&node, &wt)| CurrentSource {
            node,
            current: floor
                + if blob_total > 0.0 {
                    params.total_current * blob_share * wt / blob_total
                } else {
                    0.0
                },
        })
        .filter(|s| s.current > 0.0)
        .collect();
    let sum: f64 = sources.iter().map(|s| s.current).sum();
    let fix = params.total_current / sum;
    for s in &mut sources {
        s.current *= fix;
    }

    Ok(PdnNetlist {
        die_width: w,
        die_height: h,
        edges,
        sources,
        pads,
    })
}

/// Generates, validates and solves one case; `feature_size` is the model
/// resolution. Failures retry with a perturbed seed up to three times.
pub fn generate(params: &SynthParams, feature_size: usize) -> Result<SynthCase> {
    params.check()?;
    let mut last_err = None;
    for attempt in 0..4u64 {
        let seed = if attempt == 0 {
            params.seed
        } else {
            case_seed(params.seed, u64::MAX - attempt)
        };
        match try_generate(params, seed, feature_size) {
            Ok(c) => return Ok(c),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

fn try_generate(params: &SynthParams, seed: u64, feature_size: usize) -> Result<SynthCase> {
    let netlist = build_netlist(params, seed)?;
    if let Some(d) = validate(&netlist).into_iter().next() {
        return Err(Error::InvalidNetlist(format!("{d}")));
    }
    let (_, truth) = solver::analyze(&netlist)?;
    let features = featurize(&netlist, feature_size)?;
    Ok(SynthCase {
        case: TestCase {
            id: format!("synth_{:016x}", params.seed),
            features,
            ground_truth: Some(truth),
            provenance: Provenance::Synthetic,
        },
        netlist,
    })
}

/// The `index`-th case of the corpus seeded by `params.seed`.
pub fn generate_indexed(params: &SynthParams, index: u64, feature_size: usize) -> Result<SynthCase> {
    let p = SynthParams {
        seed: case_seed(params.seed, index),
        ..params.clone()
    };
    let mut c = generate(&p, feature_size)?;
    c.case.id = format!("case_{index:04}");
    Ok(c)
}
