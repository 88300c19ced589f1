//! Static nodal analysis of a resistive PDN.
//!
//! Pads are eliminated as Dirichlet nodes, so the remaining conductance
//! matrix is symmetric positive definite. Small systems are factored with a
//! sparse Cholesky under minimum degree ordering; larger ones use
//! Jacobi-preconditioned conjugate gradient.

use alloc::collections::{BTreeMap, BinaryHeap};
use core::cmp::Reverse;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{DropSource, Grid, IrDropMap};
use crate::netlist::{validate, Components, Layer, NodeId, NodeIndex, PdnNetlist};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Largest system factored directly under [`Backend::Auto`].
pub const DIRECT_LIMIT: usize = 50_000;

/// Compressed sparse row matrix with sorted, de-duplicated columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Reduced nodal system `matrix · v = rhs` over the non-pad nodes.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub unknowns: Vec<NodeId>,
    /// Conductances in siemens.
    pub matrix: CsrMatrix,
    /// Amperes, with pad contributions folded in.
    pub rhs: Vec<f64>,
    /// Eliminated pad nodes and their voltages.
    pub fixed: Vec<(NodeId, f64)>,
}

/// Assembles the reduced conductance system.
///
/// Rows are the non-pad nodes in first-appearance order. Each edge adds
/// `1/R` to the diagonal of its non-pad endpoints and `-1/R` off-diagonal
/// when both ends are unknown; an edge to a pad moves `V/R` into the
/// right-hand side. Each source subtracts its current from its node's row.
pub fn build_system(net: &PdnNetlist) -> Result<LinearSystem> {
    let idx = NodeIndex::from_edges(&net.edges);
    let mut pad_voltage: BTreeMap<NodeId, f64> = BTreeMap::new();
    for p in &net.pads {
        if let Some(&prev) = pad_voltage.get(&p.node) {
            if prev != p.voltage {
                return Err(Error::InvalidNetlist(format!(
                    "pad node {} driven at {prev} V and {} V",
                    p.node, p.voltage
                )));
            }
        }
        pad_voltage.insert(p.node, p.voltage);
    }

    let mut unknown_of = vec![usize::MAX; idx.nodes.len()];
    let mut unknowns = Vec::new();
    let mut fixed = Vec::new();
    for (i, n) in idx.nodes.iter().enumerate() {
        match pad_voltage.get(n) {
            Some(&v) => fixed.push((*n, v)),
            None => {
                unknown_of[i] = unknowns.len();
                unknowns.push(*n);
            }
        }
    }
    let n = unknowns.len();

    let mut triplets = Vec::with_capacity(4 * net.edges.len());
    let mut rhs = vec![0.0; n];
    // Unknown components that touch a pad through some edge.
    let mut comps = Components::new(n);
    let mut anchored = vec![false; n];
    for e in &net.edges {
        if !(e.resistance > 0.0) || !e.resistance.is_finite() {
            return Err(Error::InvalidNetlist(format!(
                "edge {}-{} has resistance {}",
                e.a, e.b, e.resistance
            )));
        }
        let g = 1.0 / e.resistance;
        let ia = unknown_of[idx.index[&e.a]];
        let ib = unknown_of[idx.index[&e.b]];
        match (ia != usize::MAX, ib != usize::MAX) {
            (true, true) => {
                triplets.push((ia, ia, g));
                triplets.push((ib, ib, g));
                triplets.push((ia, ib, -g));
                triplets.push((ib, ia, -g));
                comps.union(ia, ib);
            }
            (true, false) => {
                triplets.push((ia, ia, g));
                rhs[ia] += pad_voltage[&e.b] * g;
                anchored[ia] = true;
            }
            (false, true) => {
                triplets.push((ib, ib, g));
                rhs[ib] += pad_voltage[&e.a] * g;
                anchored[ib] = true;
            }
            (false, false) => {}
        }
    }
    for s in &net.sources {
        let Some(&i) = idx.index.get(&s.node) else {
            return Err(Error::InvalidNetlist(format!(
                "current source at {} is not connected",
                s.node
            )));
        };
        let u = unknown_of[i];
        if u != usize::MAX {
            rhs[u] -= s.current;
        }
    }

    let mut root_anchored = vec![false; n];
    for i in 0..n {
        if anchored[i] {
            let r = comps.find(i);
            root_anchored[r] = true;
        }
    }
    for i in 0..n {
        let r = comps.find(i);
        if !root_anchored[r] {
            return Err(Error::Singular(format!(
                "component containing {} has no path to a pad",
                unknowns[i]
            )));
        }
    }

    Ok(LinearSystem {
        unknowns,
        matrix: CsrMatrix::from_triplets(n, triplets),
        rhs,
        fixed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Cholesky up to [`DIRECT_LIMIT`] unknowns, conjugate gradient beyond.
    Auto,
    Cholesky,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Bound on `‖Av − b‖ / ‖b‖`.
    pub tolerance: f64,
    pub backend: Backend,
    /// CG iteration cap; `None` means `20·√n`.
    pub max_iterations: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            backend: Backend::Auto,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub backend: Backend,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solved node voltages, pads included.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeVoltages {
    pub volts: BTreeMap<NodeId, f64>,
}

impl NodeVoltages {
    pub fn get(&self, n: &NodeId) -> Option<f64> {
        self.volts.get(n).copied()
    }
}

/// Solves with the default backend choice.
pub fn solve(system: &LinearSystem, tolerance: f64) -> Result<NodeVoltages> {
    solve_with(
        system,
        &SolveOptions {
            tolerance,
            ..Default::default()
        },
    )
    .map(|(v, _)| v)
}

pub fn solve_with(system: &LinearSystem, opts: &SolveOptions) -> Result<(NodeVoltages, SolveStats)> {
    let n = system.unknowns.len();
    let backend = match opts.backend {
        Backend::Auto if n <= DIRECT_LIMIT => Backend::Cholesky,
        Backend::Auto => Backend::ConjugateGradient,
        b => b,
    };
    let (x, iterations) = match backend {
        Backend::Cholesky => {
            let factor = SparseCholesky::factor(&system.matrix)?;
            let mut x = factor.solve(&system.rhs);
            // A couple of refinement sweeps absorb rounding on stiff grids.
            let mut sweeps = 0;
            while relative_residual(&system.matrix, &x, &system.rhs) > opts.tolerance && sweeps < 3 {
                let r = residual(&system.matrix, &x, &system.rhs);
                let dx = factor.solve(&r);
                x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
                sweeps += 1;
            }
            (x, sweeps)
        }
        _ => {
            let cap = opts
                .max_iterations
                .unwrap_or_else(|| (20.0 * (n as f64).sqrt()).ceil() as usize)
                .max(1);
            conjugate_gradient(&system.matrix, &system.rhs, opts.tolerance, cap)?
        }
    };
    let rel = relative_residual(&system.matrix, &x, &system.rhs);
    if !(rel <= opts.tolerance) {
        return Err(Error::NoConvergence {
            iterations,
            residual: rel,
        });
    }
    let mut volts = BTreeMap::new();
    for (node, v) in system.unknowns.iter().zip(&x) {
        volts.insert(*node, *v);
    }
    for &(node, v) in &system.fixed {
        volts.insert(node, v);
    }
    Ok((
        NodeVoltages { volts },
        SolveStats {
            backend,
            iterations,
            relative_residual: rel,
        },
    ))
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut ax = vec![0.0; a.n];
    a.matvec(x, &mut ax);
    b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let r = norm(&residual(a, x, b));
    let bn = norm(b);
    if bn == 0.0 {
        r
    } else {
        r / bn
    }
}

fn conjugate_gradient(a: &CsrMatrix, b: &[f64], tol: f64, cap: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for it in 1..=cap {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::Singular("matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm(&r) / bn;
        if rel <= tol {
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = relative_residual(a, &x, b);
    if rel <= tol {
        Ok((x, cap))
    } else {
        Err(Error::NoConvergence {
            iterations: cap,
            residual: rel,
        })
    }
}

/// Minimum degree ordering on the explicit elimination graph, ties broken
/// by lowest index. Returns `perm` with `perm[new] = old`.
pub fn minimum_degree(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let mut done = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|i| Reverse((adj[i].len(), i))).collect();
    let mut order = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || deg != adj[v].len() {
            continue;
        }
        done[v] = true;
        order.push(v);
        let nbrs = core::mem::take(&mut adj[v]);
        for &u in &nbrs {
            // adj[u] := (adj[u] ∪ nbrs) \ {u, v}, kept sorted.
            let old = &adj[u];
            merged.clear();
            let (mut p, mut q) = (0, 0);
            while p < old.len() || q < nbrs.len() {
                let next = match (old.get(p), nbrs.get(q)) {
                    (Some(&x), Some(&y)) if x == y => {
                        p += 1;
                        q += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        p += 1;
                        x
                    }
                    (Some(_), Some(&y)) | (None, Some(&y)) => {
                        q += 1;
                        y
                    }
                    (Some(&x), None) => {
                        p += 1;
                        x
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            core::mem::swap(&mut adj[u], &mut merged);
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}

/// Sparse Cholesky factor `P A Pᵀ = L Lᵀ`, computed row by row along the
/// elimination tree. `L` is stored by columns with the diagonal first.
pub struct SparseCholesky {
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        const NONE: usize = usize::MAX;
        let n = a.n;
        let perm = minimum_degree(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        // Upper triangle of the permuted matrix, by columns.
        let mut c_ptr = vec![0usize; n + 1];
        let mut c_idx = Vec::with_capacity(a.values.len());
        let mut c_val = Vec::with_capacity(a.values.len());
        for (k, &old) in perm.iter().enumerate() {
            for (j, v) in a.row(old) {
                let i = inv[j];
                if i <= k {
                    c_idx.push(i);
                    c_val.push(v);
                }
            }
            c_ptr[k + 1] = c_idx.len();
        }

        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
                let mut i = i0;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        let mut flag = vec![NONE; n];
        let mut stack = vec![0usize; n];
        // Row pattern of L in topological order, left in stack[top..].
        let reach = |k: usize, flag: &mut [usize], stack: &mut [usize]| -> usize {
            let mut top = n;
            flag[k] = k;
            for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
                let mut i = i0;
                let mut len = 0;
                while flag[i] != k {
                    stack[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    stack[top] = stack[len];
                }
            }
            top
        };

        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = reach(k, &mut flag, &mut stack);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            col_ptr[j + 1] = col_ptr[j] + counts[j];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next: Vec<usize> = col_ptr[..n].iter().map(|p| p + 1).collect();
        let mut x = vec![0.0; n];
        flag.fill(NONE);

        for k in 0..n {
            let top = reach(k, &mut flag, &mut stack);
            for p in c_ptr[k]..c_ptr[k + 1] {
                x[c_idx[p]] = c_val[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / values[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                row_idx[next[i]] = k;
                values[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) {
                return Err(Error::Singular(format!(
                    "non-positive pivot {d:e} at row {}",
                    perm[k]
                )));
            }
            row_idx[col_ptr[k]] = k;
            values[col_ptr[k]] = d.sqrt();
        }
        Ok(Self {
            perm,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Nonzeros in `L`.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            let (p0, p1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            y[j] /= self.values[p0];
            let yj = y[j];
            for p in p0 + 1..p1 {
                y[self.row_idx[p]] -= self.values[p] * yj;
            }
        }
        for j in (0..n).rev() {
            let (p0, p1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut s = y[j];
            for p in p0 + 1..p1 {
                s -= self.values[p] * y[self.row_idx[p]];
            }
            y[j] = s / self.values[p0];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Rasterizes solved voltages into a drop map of `die_height × die_width`
/// one-micrometer pixels. Each pixel holds the largest `Vdd − v` over the M1
/// nodes inside it and zero where there is none. Drops are clamped at zero so
/// round-off on unloaded nodes never shows up as a negative drop.
pub fn ir_drop_map(net: &PdnNetlist, voltages: &NodeVoltages) -> Result<IrDropMap> {
    let vdd = net
        .supply_voltage()?
        .ok_or_else(|| Error::InvalidNetlist("netlist has no pads".into()))?;
    let mut grid = Grid::zeros(net.die_height as usize, net.die_width as usize);
    for (node, &v) in &voltages.volts {
        if node.layer != Layer::M1 || !net.in_bounds(node) {
            continue;
        }
        let (r, c) = (node.y as usize, node.x as usize);
        let drop = (vdd - v).max(0.0);
        if drop > grid.get(r, c) {
            grid.set(r, c, drop);
        }
    }
    Ok(IrDropMap {
        drop: grid,
        source: DropSource::Oracle,
    })
}

/// Validates, assembles, solves and rasterizes in one call.
pub fn analyze(net: &PdnNetlist) -> Result<(NodeVoltages, IrDropMap)> {
    if let Some(d) = validate(net).into_iter().next() {
        return Err(Error::InvalidNetlist(format!("{d}")));
    }
    net.supply_voltage()?;
    let system = build_system(net)?;
    let voltages = solve(&system, DEFAULT_TOLERANCE)?;
    let map = ir_drop_map(net, &voltages)?;
    Ok((voltages, map))
}
