//! PDN netlist model, parser, writer and validator.
//!
//! The accepted text format is a small SPICE subset:
//!
//! ```text
//! * die <W> <H>
//! R<id> <node> <node> <ohms>
//! I<id> <node> 0 <amps>
//! V<id> <node> 0 <volts>
//! * any other comment
//! ```
//!
//! Node tokens are `n_<layer>_<x>_<y>` with integer micrometer coordinates.
//! The die header is mandatory and must precede the first statement. Ground
//! is the implicit token `0`, which only current sources and pads may use.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use crate::error::{Error, Result};

/// PDN layer. Metal layers carry stripes; via layers bridge two adjacent metals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Layer {
    M1,
    M4,
    M7,
    M8,
    M9,
    M14,
    M47,
    M78,
    M89,
}

impl Layer {
    /// Channel order used by the per-layer resistance images.
    pub const ALL: [Layer; 9] = [
        Layer::M1,
        Layer::M4,
        Layer::M7,
        Layer::M8,
        Layer::M9,
        Layer::M14,
        Layer::M47,
        Layer::M78,
        Layer::M89,
    ];
    pub const METALS: [Layer; 5] = [Layer::M1, Layer::M4, Layer::M7, Layer::M8, Layer::M9];
    pub const VIAS: [Layer; 4] = [Layer::M14, Layer::M47, Layer::M78, Layer::M89];

    pub fn is_via(self) -> bool {
        matches!(self, Layer::M14 | Layer::M47 | Layer::M78 | Layer::M89)
    }

    /// Position in [`Layer::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::M1 => "M1",
            Layer::M4 => "M4",
            Layer::M7 => "M7",
            Layer::M8 => "M8",
            Layer::M9 => "M9",
            Layer::M14 => "M14",
            Layer::M47 => "M47",
            Layer::M78 => "M78",
            Layer::M89 => "M89",
        }
    }

    /// The two metal layers a via connects.
    pub fn via_metals(self) -> Option<(Layer, Layer)> {
        match self {
            Layer::M14 => Some((Layer::M1, Layer::M4)),
            Layer::M47 => Some((Layer::M4, Layer::M7)),
            Layer::M78 => Some((Layer::M7, Layer::M8)),
            Layer::M89 => Some((Layer::M8, Layer::M9)),
            _ => None,
        }
    }

    /// The via between two adjacent metal layers, in either order.
    pub fn via_between(a: Layer, b: Layer) -> Option<Layer> {
        Layer::VIAS.into_iter().find(|v| {
            let (lo, hi) = v.via_metals().unwrap();
            (a, b) == (lo, hi) || (a, b) == (hi, lo)
        })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layer {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        // "M1M4" style via names are accepted as aliases.
        Ok(match s {
            "M1" => Layer::M1,
            "M4" => Layer::M4,
            "M7" => Layer::M7,
            "M8" => Layer::M8,
            "M9" => Layer::M9,
            "M14" | "M1M4" => Layer::M14,
            "M47" | "M4M7" => Layer::M47,
            "M78" | "M7M8" => Layer::M78,
            "M89" | "M8M9" => Layer::M89,
            _ => return Err(()),
        })
    }
}

/// A PDN node: layer plus integer micrometer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeId {
    pub layer: Layer,
    pub x: u32,
    pub y: u32,
}

impl NodeId {
    pub fn new(layer: Layer, x: u32, y: u32) -> Self {
        Self { layer, x, y }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n_{}_{}_{}", self.layer, self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResistorEdge {
    pub a: NodeId,
    pub b: NodeId,
    /// Ohms.
    pub resistance: f64,
}

impl ResistorEdge {
    /// Layer the edge belongs to: a metal layer for same-layer edges, the via
    /// layer for edges bridging two adjacent metals (or a via node and one of
    /// its metals). `None` for any other combination.
    pub fn layer(&self) -> Option<Layer> {
        let (la, lb) = (self.a.layer, self.b.layer);
        if la == lb {
            return Some(la);
        }
        if let Some(v) = Layer::via_between(la, lb) {
            return Some(v);
        }
        for (via, metal) in [(la, lb), (lb, la)] {
            if let Some((lo, hi)) = via.via_metals() {
                if metal == lo || metal == hi {
                    return Some(via);
                }
            }
        }
        None
    }
}

/// Current drawn from `node` to ground.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurrentSource {
    pub node: NodeId,
    /// Amperes.
    pub current: f64,
}

/// Fixed-voltage supply node.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VoltagePad {
    pub node: NodeId,
    /// Volts.
    pub voltage: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PdnNetlist {
    /// Micrometers; node x coordinates lie in `0..die_width`.
    pub die_width: u32,
    /// Micrometers; node y coordinates lie in `0..die_height`.
    pub die_height: u32,
    pub edges: Vec<ResistorEdge>,
    pub sources: Vec<CurrentSource>,
    pub pads: Vec<VoltagePad>,
}

impl PdnNetlist {
    pub fn in_bounds(&self, n: &NodeId) -> bool {
        n.x < self.die_width && n.y < self.die_height
    }

    /// The common pad voltage, or an error when pads disagree.
    pub fn supply_voltage(&self) -> Result<Option<f64>> {
        let mut supply: Option<f64> = None;
        for p in &self.pads {
            match supply {
                None => supply = Some(p.voltage),
                Some(v) if v != p.voltage => {
                    return Err(Error::MultipleSupplies {
                        first: v,
                        second: p.voltage,
                    })
                }
                _ => {}
            }
        }
        Ok(supply)
    }

    pub fn total_current(&self) -> f64 {
        self.sources.iter().map(|s| s.current).sum()
    }
}

// ---------------------------------------------------------------------------
// Parsing

fn perr(line: usize, column: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        reason: reason.into(),
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: s + 1,
        });
    }
    out
}

fn parse_value(tok: &Token<'_>, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .text
        .parse()
        .map_err(|_| perr(line, tok.column, format!("malformed {what} '{}'", tok.text)))?;
    if !v.is_finite() {
        return Err(perr(line, tok.column, format!("non-finite {what}")));
    }
    if v <= 0.0 {
        return Err(perr(line, tok.column, format!("{what} must be positive, got {v}")));
    }
    Ok(v)
}

fn parse_coord(text: &str, line: usize, column: usize) -> Result<u32> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(perr(line, column, format!("malformed coordinate '{text}'")));
    }
    text.parse()
        .map_err(|_| perr(line, column, format!("coordinate '{text}' out of range")))
}

fn parse_node(tok: &Token<'_>, line: usize, die: (u32, u32)) -> Result<NodeId> {
    let mut parts = tok.text.split('_');
    let prefix = parts.next();
    let (layer, x, y) = match (prefix, parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("n"), Some(l), Some(x), Some(y), None) => (l, x, y),
        _ => {
            return Err(perr(
                line,
                tok.column,
                format!("malformed node '{}', expected n_<layer>_<x>_<y>", tok.text),
            ))
        }
    };
    let layer: Layer = layer
        .parse()
        .map_err(|_| perr(line, tok.column, format!("unknown layer '{layer}'")))?;
    let node = NodeId::new(
        layer,
        parse_coord(x, line, tok.column)?,
        parse_coord(y, line, tok.column)?,
    );
    if node.x >= die.0 || node.y >= die.1 {
        return Err(perr(
            line,
            tok.column,
            format!("node {node} outside die {}x{}", die.0, die.1),
        ));
    }
    Ok(node)
}

fn parse_header(tokens: &[Token<'_>], line: usize) -> Result<Option<(u32, u32)>> {
    // tokens[0] is "*" or "*die"
    let rest: Vec<&Token<'_>> = if tokens[0].text == "*" {
        tokens[1..].iter().collect()
    } else {
        return Ok(None);
    };
    if rest.first().map(|t| t.text) != Some("die") {
        return Ok(None);
    }
    if rest.len() != 3 {
        return Err(perr(line, rest[0].column, "die header needs width and height"));
    }
    let w = parse_coord(rest[1].text, line, rest[1].column)?;
    let h = parse_coord(rest[2].text, line, rest[2].column)?;
    if w == 0 || h == 0 {
        return Err(perr(line, rest[1].column, "die dimensions must be positive"));
    }
    Ok(Some((w, h)))
}

/// Parses netlist text. Accepts LF or CRLF line endings.
pub fn parse_netlist(text: &str) -> Result<PdnNetlist> {
    let mut die: Option<(u32, u32)> = None;
    let mut net = PdnNetlist::default();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        if tokens[0].text.starts_with('*') {
            if die.is_none() {
                if let Some(d) = parse_header(&tokens, lineno)? {
                    die = Some(d);
                    net.die_width = d.0;
                    net.die_height = d.1;
                }
            }
            continue;
        }
        let Some(die) = die else {
            return Err(perr(lineno, 1, "statement before '* die <W> <H>' header"));
        };
        let head = &tokens[0];
        let kind = head.text.chars().next().unwrap().to_ascii_uppercase();
        if head.text.len() < 2 || !matches!(kind, 'R' | 'I' | 'V') {
            return Err(perr(
                lineno,
                head.column,
                format!("unknown statement '{}'", head.text),
            ));
        }
        if tokens.len() != 4 {
            let col = tokens.get(4).map_or(line.len() + 1, |t| t.column);
            return Err(perr(
                lineno,
                col,
                format!("expected 4 fields, found {}", tokens.len()),
            ));
        }
        match kind {
            'R' => {
                let a = parse_node(&tokens[1], lineno, die)?;
                let b = parse_node(&tokens[2], lineno, die)?;
                if a == b {
                    return Err(perr(
                        lineno,
                        tokens[2].column,
                        format!("resistor connects {a} to itself"),
                    ));
                }
                let resistance = parse_value(&tokens[3], lineno, "resistance")?;
                net.edges.push(ResistorEdge { a, b, resistance });
            }
            _ => {
                let node = parse_node(&tokens[1], lineno, die)?;
                if tokens[2].text != "0" {
                    return Err(perr(
                        lineno,
                        tokens[2].column,
                        format!("second terminal must be ground '0', found '{}'", tokens[2].text),
                    ));
                }
                if kind == 'I' {
                    let current = parse_value(&tokens[3], lineno, "current")?;
                    net.sources.push(CurrentSource { node, current });
                } else {
                    let voltage = parse_value(&tokens[3], lineno, "voltage")?;
                    net.pads.push(VoltagePad { node, voltage });
                }
            }
        }
    }

    if die.is_none() {
        return Err(perr(1, 1, "missing '* die <W> <H>' header"));
    }
    Ok(net)
}

/// Serializes a netlist. Edges, then sources, then pads, each in list order.
pub fn write_netlist(net: &PdnNetlist) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "* die {} {}", net.die_width, net.die_height);
    for (i, e) in net.edges.iter().enumerate() {
        let _ = writeln!(out, "R{} {} {} {}", i + 1, e.a, e.b, e.resistance);
    }
    for (i, s) in net.sources.iter().enumerate() {
        let _ = writeln!(out, "I{} {} 0 {}", i + 1, s.node, s.current);
    }
    for (i, p) in net.pads.iter().enumerate() {
        let _ = writeln!(out, "V{} {} 0 {}", i + 1, p.node, p.voltage);
    }
    out
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    EmptyNetlist,
    NonPositiveValue,
    SelfLoop,
    OutOfBounds,
    InvalidLayerPair,
    DanglingTerminal,
    SourceNotOnM1,
    ViaTerminal,
    FloatingComponent,
}

impl DiagnosticKind {
    pub fn name(self) -> &'static str {
        match self {
            DiagnosticKind::EmptyNetlist => "empty netlist",
            DiagnosticKind::NonPositiveValue => "non-positive value",
            DiagnosticKind::SelfLoop => "self loop",
            DiagnosticKind::OutOfBounds => "out of bounds",
            DiagnosticKind::InvalidLayerPair => "invalid layer pair",
            DiagnosticKind::DanglingTerminal => "dangling terminal",
            DiagnosticKind::SourceNotOnM1 => "source not on M1",
            DiagnosticKind::ViaTerminal => "terminal on via layer",
            DiagnosticKind::FloatingComponent => "floating component",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

/// Dense node numbering in first-appearance order over the edge list.
pub(crate) struct NodeIndex {
    pub nodes: Vec<NodeId>,
    pub index: BTreeMap<NodeId, usize>,
}

impl NodeIndex {
    pub fn from_edges(edges: &[ResistorEdge]) -> Self {
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for e in edges {
            for n in [e.a, e.b] {
                index.entry(n).or_insert_with(|| {
                    nodes.push(n);
                    nodes.len() - 1
                });
            }
        }
        Self { nodes, index }
    }
}

/// Union-find with path halving.
pub(crate) struct Components {
    parent: Vec<usize>,
}

impl Components {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Checks every netlist invariant. An empty result means the nodal system
/// is well posed.
///
/// Every connected component must reach a pad; a component without one is
/// reported as floating whether or not it carries load, since its voltages
/// are undetermined either way.
pub fn validate(net: &PdnNetlist) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |kind, message: String| diags.push(Diagnostic { kind, message });

    if net.edges.is_empty() {
        push(DiagnosticKind::EmptyNetlist, "netlist has no resistor edges".to_string());
    }
    for (i, e) in net.edges.iter().enumerate() {
        let name = format!("R{}", i + 1);
        if !(e.resistance > 0.0) || !e.resistance.is_finite() {
            push(
                DiagnosticKind::NonPositiveValue,
                format!("{name} has resistance {}", e.resistance),
            );
        }
        if e.a == e.b {
            push(DiagnosticKind::SelfLoop, format!("{name} connects {} to itself", e.a));
        }
        for n in [e.a, e.b] {
            if !net.in_bounds(&n) {
                push(DiagnosticKind::OutOfBounds, format!("{name} node {n} outside die"));
            }
        }
        match e.layer() {
            None => push(
                DiagnosticKind::InvalidLayerPair,
                format!("{name} joins {} and {}", e.a.layer, e.b.layer),
            ),
            Some(l) if l.is_via() && (e.a.x, e.a.y) != (e.b.x, e.b.y) => push(
                DiagnosticKind::InvalidLayerPair,
                format!("{name} is a {l} via with displaced endpoints {} and {}", e.a, e.b),
            ),
            _ => {}
        }
    }

    let idx = NodeIndex::from_edges(&net.edges);
    for (i, s) in net.sources.iter().enumerate() {
        let name = format!("I{}", i + 1);
        if !(s.current > 0.0) || !s.current.is_finite() {
            push(DiagnosticKind::NonPositiveValue, format!("{name} has current {}", s.current));
        }
        if s.node.layer != Layer::M1 {
            push(DiagnosticKind::SourceNotOnM1, format!("{name} taps {}", s.node));
        }
    }
    for (i, p) in net.pads.iter().enumerate() {
        let name = format!("V{}", i + 1);
        if !(p.voltage > 0.0) || !p.voltage.is_finite() {
            push(DiagnosticKind::NonPositiveValue, format!("{name} has voltage {}", p.voltage));
        }
        if p.node.layer.is_via() {
            push(DiagnosticKind::ViaTerminal, format!("{name} sits on via node {}", p.node));
        }
    }
    let terminals = net
        .sources
        .iter()
        .map(|s| ('I', s.node))
        .chain(net.pads.iter().map(|p| ('V', p.node)));
    for (kind, node) in terminals {
        if !net.in_bounds(&node) {
            push(DiagnosticKind::OutOfBounds, format!("{kind} terminal {node} outside die"));
        }
        if !idx.index.contains_key(&node) {
            push(
                DiagnosticKind::DanglingTerminal,
                format!("{kind} terminal {node} is not on any resistor"),
            );
        }
    }

    let mut comps = Components::new(idx.nodes.len());
    for e in &net.edges {
        comps.union(idx.index[&e.a], idx.index[&e.b]);
    }
    let mut has_pad = BTreeMap::new();
    for p in &net.pads {
        if let Some(&i) = idx.index.get(&p.node) {
            has_pad.insert(comps.find(i), true);
        }
    }
    let mut reported = BTreeMap::new();
    for i in 0..idx.nodes.len() {
        let root = comps.find(i);
        if !has_pad.contains_key(&root) && !reported.contains_key(&root) {
            reported.insert(root, ());
            let loaded = net
                .sources
                .iter()
                .any(|s| idx.index.get(&s.node).map(|&j| comps.find(j)) == Some(root));
            push(
                DiagnosticKind::FloatingComponent,
                format!(
                    "component containing {} has no pad{}",
                    idx.nodes[root],
                    if loaded { " but carries load" } else { "" }
                ),
            );
        }
    }
    diags
}
