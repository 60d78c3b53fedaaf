//! Geometry of the probability simplex.
//!
//! States live in the simplex of probability vectors over `d` points; the
//! fixed chart drops the last coordinate and works with the first `d - 1`.
//! This module holds the coordinate dictionary, intrinsic (tangent)
//! derivatives, the regular chart lattice used by every grid solver, and
//! interpolation on that lattice.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerance enforced on simplex membership after construction.
pub const MEMBERSHIP_TOL: f64 = 1e-12;
/// Largest constraint violation a constructor will repair silently.
const REPAIR_TOL: f64 = 1e-9;

/// Probability vector over `d` states.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint<S: Real> {
    p: Vec<S>,
}

impl<S: Real> SimplexPoint<S> {
    /// Validates nonnegativity and unit mass (small floating-point drift is
    /// repaired; violations beyond `1e-9` are rejected).
    pub fn new(p: Vec<S>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidPoint("need at least two states".into()));
        }
        let mut q = p;
        let mut sum = S::zero();
        for &v in &q {
            if !v.is_finite() || v < S::c(-REPAIR_TOL) {
                return Err(Error::InvalidPoint(format!("coordinate {v} out of range")));
            }
            sum = sum + v;
        }
        if (sum - S::one()).abs() > S::c(REPAIR_TOL) {
            return Err(Error::InvalidPoint(format!("mass {sum} != 1")));
        }
        for v in q.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mass: S = q.iter().copied().sum();
        if mass != S::one() {
            for v in q.iter_mut() {
                *v = *v / mass;
            }
        }
        Ok(SimplexPoint { p: q })
    }

    /// Uniform distribution over `d` states.
    pub fn uniform(d: usize) -> Self {
        let w = S::one() / S::from_usize(d).unwrap();
        SimplexPoint { p: vec![w; d] }
    }

    /// Point mass on `state`.
    pub fn dirac(d: usize, state: usize) -> Self {
        let mut p = vec![S::zero(); d];
        p[state] = S::one();
        SimplexPoint { p }
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn coords(&self) -> &[S] {
        &self.p
    }

    pub fn get(&self, i: usize) -> S {
        self.p[i]
    }

    /// All coordinates strictly above `margin`.
    pub fn is_interior(&self, margin: S) -> bool {
        self.p.iter().all(|&v| v > margin)
    }

    /// Drops the last coordinate.
    pub fn to_chart(&self) -> ChartPoint<S> {
        ChartPoint { x: self.p[..self.p.len() - 1].to_vec() }
    }
}

/// Chart image of a simplex point: the first `d - 1` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint<S: Real> {
    x: Vec<S>,
}

impl<S: Real> ChartPoint<S> {
    pub fn new(x: Vec<S>) -> Result<Self> {
        let mut sum = S::zero();
        for &v in &x {
            if !v.is_finite() || v < S::c(-REPAIR_TOL) {
                return Err(Error::InvalidPoint(format!("chart coordinate {v} out of range")));
            }
            sum = sum + v;
        }
        if sum > S::one() + S::c(REPAIR_TOL) {
            return Err(Error::InvalidPoint(format!("chart mass {sum} > 1")));
        }
        Ok(ChartPoint { x })
    }

    /// Construction without validation, for points produced by clamping.
    #[cfg(test)]
    pub(crate) fn new_unchecked(x: Vec<S>) -> Self {
        ChartPoint { x }
    }

    /// Projects onto the chart simplex and constructs the result.
    pub fn new_clamped(x: &[S]) -> Self {
        ChartPoint { x: clamp_to_chart(x).0 }
    }

    /// Chart dimension `d - 1`.
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn coords(&self) -> &[S] {
        &self.x
    }

    /// The eliminated coordinate `1 - sum`.
    pub fn slack(&self) -> S {
        let s: S = self.x.iter().copied().sum();
        (S::one() - s).max(S::zero())
    }

    /// Reconstructs the full probability vector.
    pub fn from_chart(&self) -> SimplexPoint<S> {
        let mut p = self.x.clone();
        p.push(self.slack());
        SimplexPoint { p }
    }
}

/// Tangent lift of a chart covector: maps the chart gradient of a function to
/// its intrinsic gradient. Preserves differences: output components satisfy
/// `w_i - w_j = z_i - z_j` for `i, j < d` and `w_i - w_d = z_i`.
pub fn chart_to_intrinsic<S: Real>(z: &[S]) -> Vec<S> {
    let d = z.len() + 1;
    let s: S = z.iter().copied().sum();
    let shift = s / S::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(d);
    for &v in z {
        out.push(v - shift);
    }
    out.push(-shift);
    out
}

/// Chart covector from an intrinsic one: `z_i = w_i - w_d`.
pub fn intrinsic_to_chart<S: Real>(w: &[S]) -> Vec<S> {
    let d = w.len();
    w[..d - 1].iter().map(|&v| v - w[d - 1]).collect()
}

/// Intrinsic gradient of a closed-form function by central differences along
/// the tangent directions `e_i - mean(e)`. Interior points only.
pub fn intrinsic_gradient<S: Real, F: Fn(&[S]) -> S>(
    f: F,
    p: &SimplexPoint<S>,
    fd_step: S,
) -> Result<Vec<S>> {
    let d = p.dim();
    if !p.is_interior(fd_step) {
        return Err(Error::InvalidPoint("interior-only derivative".into()));
    }
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(d);
    let mut plus = p.coords().to_vec();
    let mut minus = p.coords().to_vec();
    for i in 0..d {
        for j in 0..d {
            let dir = if j == i { S::one() - inv_d } else { -inv_d };
            plus[j] = p.get(j) + fd_step * dir;
            minus[j] = p.get(j) - fd_step * dir;
        }
        out.push((f(&plus) - f(&minus)) / (S::c(2.0) * fd_step));
        plus.copy_from_slice(p.coords());
        minus.copy_from_slice(p.coords());
    }
    Ok(out)
}

/// Regular lattice in chart coordinates: nodes `{ x : x_j = k_j h, sum x <= 1 }`.
#[derive(Debug)]
pub struct SimplexGrid<S: Real> {
    d: usize,
    n: usize,
    h: S,
    nodes: Vec<Vec<u32>>,
    binomials: Vec<Vec<u128>>,
}

impl<S: Real> SimplexGrid<S> {
    /// Grid over the simplex of `d` states with `n` subdivisions (`h = 1/n`).
    pub fn new(d: usize, n: usize) -> Result<Arc<Self>> {
        if d < 2 {
            return Err(Error::InvalidConfig("grid needs d >= 2".into()));
        }
        if n == 0 {
            return Err(Error::InvalidConfig("grid needs n >= 1".into()));
        }
        let m = d - 1;
        let binomials = pascal(n + d + 2);
        let mut nodes = Vec::new();
        let mut k = vec![0u32; m];
        loop {
            nodes.push(k.clone());
            // lexicographic successor under sum <= n
            let mut j = m;
            loop {
                if j == 0 {
                    let count = nodes.len();
                    let expect = binomials[n + m][m] as usize;
                    debug_assert_eq!(count, expect);
                    let h = S::one() / S::from_usize(n).unwrap();
                    return Ok(Arc::new(SimplexGrid { d, n, h, nodes, binomials }));
                }
                j -= 1;
                let used: u32 = k[..=j].iter().sum();
                if (used as usize) < n {
                    k[j] += 1;
                    for v in k[j + 1..].iter_mut() {
                        *v = 0;
                    }
                    break;
                }
                k[j] = 0;
            }
        }
    }

    pub fn states(&self) -> usize {
        self.d
    }

    /// Chart dimension `d - 1`.
    pub fn chart_dim(&self) -> usize {
        self.d - 1
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> S {
        self.h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi_index(&self, node: usize) -> &[u32] {
        &self.nodes[node]
    }

    pub fn chart(&self, node: usize) -> ChartPoint<S> {
        let x = self.nodes[node]
            .iter()
            .map(|&k| S::from_u32(k).unwrap() * self.h)
            .collect();
        ChartPoint { x }
    }

    pub fn point(&self, node: usize) -> SimplexPoint<S> {
        self.chart(node).from_chart()
    }

    /// Number of subdivisions left before the diagonal face `sum x = 1`.
    pub fn slack_steps(&self, node: usize) -> usize {
        let used: u32 = self.nodes[node].iter().sum();
        self.n - used as usize
    }

    /// All multi-index entries >= 1 and slack >= 1.
    pub fn is_interior(&self, node: usize) -> bool {
        self.slack_steps(node) >= 1 && self.nodes[node].iter().all(|&k| k >= 1)
    }

    /// Lexicographic rank of a multi-index, if inside the lattice.
    pub fn rank(&self, k: &[u32]) -> Option<usize> {
        let m = self.d - 1;
        debug_assert_eq!(k.len(), m);
        let total: u32 = k.iter().sum();
        if total as usize > self.n {
            return None;
        }
        let mut rank = 0u128;
        let mut remaining = self.n;
        for (j, &kj) in k.iter().enumerate() {
            let tail = m - j - 1;
            for a in 0..kj as usize {
                // count of tail-vectors with sum <= remaining - a
                rank += self.binomials[remaining - a + tail][tail];
            }
            remaining -= kj as usize;
        }
        Some(rank as usize)
    }

    /// Node shifted by `delta` along chart axes; `None` if it leaves the grid.
    pub fn shifted(&self, node: usize, delta: &[i32]) -> Option<usize> {
        let k = &self.nodes[node];
        let mut out = Vec::with_capacity(k.len());
        for (a, &d) in k.iter().zip(delta) {
            let v = *a as i64 + d as i64;
            if v < 0 {
                return None;
            }
            out.push(v as u32);
        }
        self.rank(&out)
    }

    /// Neighbor one step along a single chart axis.
    pub fn neighbor(&self, node: usize, axis: usize, step: i32) -> Option<usize> {
        let mut delta = vec![0i32; self.d - 1];
        delta[axis] = step;
        self.shifted(node, &delta)
    }

    /// Neighbor after moving one mesh step of mass from state `from` to state
    /// `to` (full-coordinate edge move).
    pub fn edge_neighbor(&self, node: usize, from: usize, to: usize) -> Option<usize> {
        let m = self.d - 1;
        let mut delta = vec![0i32; m];
        if from < m {
            delta[from] -= 1;
        }
        if to < m {
            delta[to] += 1;
        }
        if from >= m {
            // moving mass out of the eliminated state: need slack >= 1
            if self.slack_steps(node) == 0 {
                return None;
            }
        }
        self.shifted(node, &delta)
    }
}

fn pascal(rows: usize) -> Vec<Vec<u128>> {
    let mut t = vec![vec![0u128; rows]; rows];
    for i in 0..rows {
        t[i][0] = 1;
        for j in 1..=i {
            t[i][j] = t[i - 1][j - 1] + if j <= i - 1 { t[i - 1][j] } else { 0 };
        }
    }
    t
}

/// Time-indexed field of `width`-vectors on a [`SimplexGrid`].
#[derive(Clone, Debug)]
pub struct GridField<S: Real> {
    pub grid: Arc<SimplexGrid<S>>,
    pub times: Vec<S>,
    pub width: usize,
    values: Vec<S>,
}

impl<S: Real> GridField<S> {
    pub fn zeros(grid: Arc<SimplexGrid<S>>, times: Vec<S>, width: usize) -> Self {
        let len = times.len() * grid.len() * width;
        GridField { grid, times, width, values: vec![S::zero(); len] }
    }

    /// Uniform time mesh with `steps` intervals on `[t0, t1]`.
    pub fn time_mesh(t0: S, t1: S, steps: usize) -> Vec<S> {
        let dt = (t1 - t0) / S::from_usize(steps).unwrap();
        (0..=steps).map(|i| t0 + dt * S::from_usize(i).unwrap()).collect()
    }

    #[inline]
    fn offset(&self, t: usize, node: usize) -> usize {
        (t * self.grid.len() + node) * self.width
    }

    #[inline]
    pub fn at(&self, t: usize, node: usize, comp: usize) -> S {
        self.values[self.offset(t, node) + comp]
    }

    #[inline]
    pub fn set(&mut self, t: usize, node: usize, comp: usize, v: S) {
        let o = self.offset(t, node);
        self.values[o + comp] = v;
    }

    pub fn node_values(&self, t: usize, node: usize) -> &[S] {
        let o = self.offset(t, node);
        &self.values[o..o + self.width]
    }

    pub fn time_slice(&self, t: usize) -> &[S] {
        let w = self.grid.len() * self.width;
        &self.values[t * w..(t + 1) * w]
    }

    pub fn time_slice_mut(&mut self, t: usize) -> &mut [S] {
        let w = self.grid.len() * self.width;
        &mut self.values[t * w..(t + 1) * w]
    }

    pub fn raw(&self) -> &[S] {
        &self.values
    }

    pub fn raw_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Index of the time slice closest to `t`.
    pub fn nearest_time(&self, t: S) -> usize {
        if self.times.len() == 1 {
            return 0;
        }
        let t0 = self.times[0];
        let dt = self.times[1] - self.times[0];
        let i = ((t - t0) / dt).round().to_f64_lossy() as isize;
        i.clamp(0, self.times.len() as isize - 1) as usize
    }

    /// Interpolates at `(t, x)`: linear in time, barycentric on the lattice
    /// simplices in space. Out-of-domain queries are clamped to the nearest
    /// in-domain point; the clamp magnitude is returned alongside the value.
    pub fn interpolate(&self, t: S, x: &ChartPoint<S>) -> Result<(Vec<S>, S)> {
        let (xc, clamp) = clamp_to_chart(x.coords());
        let nt = self.times.len();
        let (i0, i1, wt) = if nt == 1 {
            (0, 0, S::zero())
        } else {
            let t0 = self.times[0];
            let dt = self.times[1] - t0;
            let s = ((t - t0) / dt).max(S::zero()).min(S::from_usize(nt - 1).unwrap());
            let i = s.floor().to_f64_lossy() as usize;
            let i = i.min(nt - 2);
            (i, i + 1, s - S::from_usize(i).unwrap())
        };
        let (nodes, weights) = self.spatial_stencil(&xc)?;
        let mut out = vec![S::zero(); self.width];
        for (node, w) in nodes.iter().zip(&weights) {
            for c in 0..self.width {
                let v0 = self.at(i0, *node, c);
                let v1 = self.at(i1, *node, c);
                out[c] = out[c] + *w * ((S::one() - wt) * v0 + wt * v1);
            }
        }
        Ok((out, clamp))
    }

    pub fn interpolate_scalar(&self, t: S, x: &ChartPoint<S>) -> Result<S> {
        Ok(self.interpolate(t, x)?.0[0])
    }

    /// Barycentric stencil (nodes and nonnegative weights summing to one) of
    /// an in-chart point. Supports chart dimensions 1 and 2.
    pub fn spatial_stencil(&self, x: &[S]) -> Result<(Vec<usize>, Vec<S>)> {
        let grid = &self.grid;
        let n = grid.subdivisions();
        let nf = S::from_usize(n).unwrap();
        match grid.chart_dim() {
            1 => {
                let u = (x[0] * nf).max(S::zero()).min(nf);
                let i = u.floor().to_f64_lossy() as usize;
                let i = i.min(n - 1);
                let f = u - S::from_usize(i).unwrap();
                Ok((vec![i, i + 1], vec![S::one() - f, f]))
            }
            2 => {
                // full-coordinate barycentric scheme
                let p3 = (S::one() - x[0] - x[1]).max(S::zero());
                let u = [x[0] * nf, x[1] * nf, p3 * nf];
                let mut b = [0usize; 3];
                let mut f = [S::zero(); 3];
                for j in 0..3 {
                    let fl = u[j].floor().to_f64_lossy() as usize;
                    b[j] = fl.min(n);
                    f[j] = (u[j] - S::from_usize(b[j]).unwrap()).max(S::zero());
                }
                let r = n as i64 - (b[0] + b[1] + b[2]) as i64;
                let node = |k1: usize, k2: usize| -> Result<usize> {
                    grid.rank(&[k1 as u32, k2 as u32]).ok_or_else(|| {
                        Error::Solver("interpolation stencil left the lattice".into())
                    })
                };
                match r {
                    0 => Ok((vec![node(b[0], b[1])?], vec![S::one()])),
                    1 => {
                        let nodes = vec![
                            node(b[0] + 1, b[1])?,
                            node(b[0], b[1] + 1)?,
                            node(b[0], b[1])?,
                        ];
                        let sum = f[0] + f[1] + f[2];
                        Ok((nodes, vec![f[0] / sum, f[1] / sum, f[2] / sum]))
                    }
                    2 => {
                        let nodes = vec![
                            node(b[0], b[1] + 1)?,
                            node(b[0] + 1, b[1])?,
                            node(b[0] + 1, b[1] + 1)?,
                        ];
                        let w = [S::one() - f[0], S::one() - f[1], S::one() - f[2]];
                        let sum = w[0] + w[1] + w[2];
                        Ok((nodes, vec![w[0] / sum, w[1] / sum, w[2] / sum]))
                    }
                    _ => Err(Error::Solver(format!("degenerate stencil residue {r}"))),
                }
            }
            m => Err(Error::Unsupported(m + 1, "lattice interpolation needs d <= 3".into())),
        }
    }

    /// Chart gradient of component `comp` at a node by finite differences:
    /// central where both axis neighbors exist, one-sided otherwise.
    /// `stride` widens the stencil (2 damps noise for nested derivatives).
    pub fn chart_gradient(&self, t: usize, node: usize, comp: usize, stride: i32) -> Vec<S> {
        let grid = &self.grid;
        let m = grid.chart_dim();
        let h = grid.h() * S::from_i32(stride).unwrap();
        let mut out = Vec::with_capacity(m);
        for axis in 0..m {
            let up = grid.neighbor(node, axis, stride);
            let dn = grid.neighbor(node, axis, -stride);
            let g = match (up, dn) {
                (Some(u), Some(l)) => (self.at(t, u, comp) - self.at(t, l, comp)) / (S::c(2.0) * h),
                (Some(u), None) => (self.at(t, u, comp) - self.at(t, node, comp)) / h,
                (None, Some(l)) => (self.at(t, node, comp) - self.at(t, l, comp)) / h,
                (None, None) => {
                    // stride too wide for this node: fall back to step one
                    let u1 = grid.neighbor(node, axis, 1);
                    let l1 = grid.neighbor(node, axis, -1);
                    match (u1, l1) {
                        (Some(u), Some(l)) => {
                            (self.at(t, u, comp) - self.at(t, l, comp)) / (S::c(2.0) * grid.h())
                        }
                        (Some(u), None) => (self.at(t, u, comp) - self.at(t, node, comp)) / grid.h(),
                        (None, Some(l)) => (self.at(t, node, comp) - self.at(t, l, comp)) / grid.h(),
                        (None, None) => self.corner_axis_difference(t, node, comp, axis),
                    }
                }
            };
            out.push(g);
        }
        out
    }

    /// Axis difference at a corner where no direct axis neighbour exists:
    /// shifts the base one step down another coordinate and differences the
    /// pair there (exact on affine fields).
    fn corner_axis_difference(&self, t: usize, node: usize, comp: usize, axis: usize) -> S {
        let grid = &self.grid;
        let m = grid.chart_dim();
        for b in 0..m {
            if b == axis {
                continue;
            }
            let mut delta = vec![0i32; m];
            delta[b] = -1;
            if let Some(base) = grid.shifted(node, &delta) {
                delta[axis] = 1;
                if let Some(up) = grid.shifted(node, &delta) {
                    return (self.at(t, up, comp) - self.at(t, base, comp)) / grid.h();
                }
            }
        }
        S::zero()
    }

    /// Intrinsic gradient of component `comp` at a node (chart differences
    /// lifted through the tangent map).
    pub fn intrinsic_gradient_at(&self, t: usize, node: usize, comp: usize, stride: i32) -> Vec<S> {
        chart_to_intrinsic(&self.chart_gradient(t, node, comp, stride))
    }

    /// Width-`d` field of intrinsic gradients of component `comp`.
    pub fn gradient_field(&self, comp: usize, stride: i32) -> GridField<S> {
        let d = self.grid.states();
        let mut out = GridField::zeros(self.grid.clone(), self.times.clone(), d);
        for t in 0..self.times.len() {
            for node in 0..self.grid.len() {
                let g = self.intrinsic_gradient_at(t, node, comp, stride);
                for (c, v) in g.into_iter().enumerate() {
                    out.set(t, node, c, v);
                }
            }
        }
        out
    }

    /// Spatial interpolation within a single time slice.
    pub fn interpolate_at_slice(&self, t: usize, x: &[S]) -> Result<(Vec<S>, S)> {
        let (xc, clamp) = clamp_to_chart(x);
        let (nodes, weights) = self.spatial_stencil(&xc)?;
        let mut out = vec![S::zero(); self.width];
        for (node, w) in nodes.iter().zip(&weights) {
            for c in 0..self.width {
                out[c] = out[c] + *w * self.at(t, *node, c);
            }
        }
        Ok((out, clamp))
    }
}

/// Projects a chart vector onto `{ x >= 0, sum x <= 1 }`; returns the moved
/// distance (sup norm) as the second component.
pub fn clamp_to_chart<S: Real>(x: &[S]) -> (Vec<S>, S) {
    let mut y: Vec<S> = x.iter().map(|&v| v.max(S::zero())).collect();
    let sum: S = y.iter().copied().sum();
    if sum > S::one() {
        // Euclidean projection onto the full simplex surface
        let mut sorted = y.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut acc = S::zero();
        let mut tau = S::zero();
        let mut k = S::zero();
        for (i, &v) in sorted.iter().enumerate() {
            acc = acc + v;
            let kk = S::from_usize(i + 1).unwrap();
            let t = (acc - S::one()) / kk;
            if v - t > S::zero() {
                tau = t;
                k = kk;
            }
        }
        let _ = k;
        for v in y.iter_mut() {
            *v = (*v - tau).max(S::zero());
        }
    }
    let mut moved = S::zero();
    for (a, b) in x.iter().zip(&y) {
        moved = moved.max((*a - *b).abs());
    }
    (y, moved)
}


#[cfg(test)]
mod f32_smoke {
    use super::*;

    #[test]
    fn kernels_instantiate_for_f32() {
        let grid = SimplexGrid::<f32>::new(3, 8).unwrap();
        assert_eq!(grid.len(), 45);
        let p = SimplexPoint::<f32>::new(vec![0.5, 0.3, 0.2]).unwrap();
        let w = chart_to_intrinsic(&[0.5f32, -0.25]);
        assert!((w.iter().copied().sum::<f32>()).abs() < 1e-6);
        let g = intrinsic_gradient(|q: &[f32]| q[0] * q[0], &p, 1e-3).unwrap();
        assert!((g.iter().copied().sum::<f32>()).abs() < 1e-4);
        let mut f = GridField::<f32>::zeros(grid.clone(), vec![0.0, 1.0], 1);
        f.set(0, 3, 0, 1.5);
        let v = f.interpolate(0.0, &grid.chart(3)).unwrap().0[0];
        assert!((v - 1.5).abs() < 1e-6);
    }
}
