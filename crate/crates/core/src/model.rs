//! Problem data and the Hamiltonian library.
//!
//! A model is a finite-state control/game specification: per-state running
//! and terminal costs `f`, `g`, optional scalar potentials `F`, `G` whose
//! intrinsic gradients reproduce the centred costs, and the control cap `M`.
//! The Hamiltonians here are the building blocks of every solver: the
//! quadratic-in-rate cost gives a clamp as the pointwise minimiser.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::simplex::{intrinsic_gradient, ChartPoint, SimplexPoint};

/// Per-state cost: maps a simplex point to a `d`-vector.
pub type StateFn<S> = Arc<dyn Fn(&SimplexPoint<S>) -> Vec<S> + Send + Sync>;
/// Scalar potential on the simplex.
pub type PotentialFn<S> = Arc<dyn Fn(&SimplexPoint<S>) -> S + Send + Sync>;

/// Tolerance for the potential/cost compatibility residual.
pub const POTENTIAL_RESIDUAL_TOL: f64 = 1e-6;

/// Transition-rate control: nonnegative off-diagonal rates capped at `M`,
/// diagonal equal to minus the row sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMatrix<S: Real> {
    d: usize,
    rates: Vec<S>,
}

impl<S: Real> ControlMatrix<S> {
    pub fn zero(d: usize) -> Self {
        ControlMatrix { d, rates: vec![S::zero(); d * d] }
    }

    /// Builds from off-diagonal entries in row-major order
    /// `(1,2),(1,3),...,(2,1),(2,3),...`; rejects entries outside `[0, cap]`.
    pub fn from_off_diagonal(d: usize, off: &[S], cap: S) -> Result<Self> {
        if off.len() != d * (d - 1) {
            return Err(Error::InvalidModel(format!(
                "expected {} off-diagonal rates, got {}",
                d * (d - 1),
                off.len()
            )));
        }
        let mut m = ControlMatrix::zero(d);
        let mut it = off.iter();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let v = *it.next().unwrap();
                    if !(S::zero()..=cap + S::c(1e-12)).contains(&v) {
                        return Err(Error::InvalidModel(format!("rate {v} outside [0, {cap}]")));
                    }
                    m.set_rate(i, j, v.min(cap).max(S::zero()));
                }
            }
        }
        Ok(m)
    }

    /// Clamp feedback from a value vector: rate `i -> j` is `a_star(w_i - w_j)`.
    pub fn from_values(w: &[S], cap: S) -> Self {
        let d = w.len();
        let mut m = ControlMatrix::zero(d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    m.set_rate(i, j, a_star(w[i] - w[j], cap));
                }
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> S {
        self.rates[i * self.d + j]
    }

    /// Sets an off-diagonal rate, keeping the diagonal consistent.
    pub fn set_rate(&mut self, i: usize, j: usize, v: S) {
        assert_ne!(i, j);
        self.rates[i * self.d + j] = v;
        let mut row = S::zero();
        for j in 0..self.d {
            if j != i {
                row = row + self.rates[i * self.d + j];
            }
        }
        self.rates[i * self.d + i] = -row;
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.d * (self.d - 1));
        for i in 0..self.d {
            for j in 0..self.d {
                if i != j {
                    out.push(self.rate(i, j));
                }
            }
        }
        out
    }

    /// Drift of the forward equation: `dq_i = sum_j q_j rate(j, i)`.
    pub fn apply_drift(&self, q: &[S]) -> Vec<S> {
        let d = self.d;
        let mut out = vec![S::zero(); d];
        for i in 0..d {
            let mut acc = S::zero();
            for j in 0..d {
                acc = acc + q[j] * self.rate(j, i);
            }
            out[i] = acc;
        }
        out
    }

    pub fn sup_norm(&self) -> S {
        self.off_diagonal().into_iter().fold(S::zero(), |a, b| a.max(b.abs()))
    }
}

/// Quadratic control cost of row `i`: half the squared off-diagonal rates.
pub fn lagrangian<S: Real>(i: usize, alpha: &ControlMatrix<S>) -> S {
    let mut acc = S::zero();
    for j in 0..alpha.dim() {
        if j != i {
            let r = alpha.rate(i, j);
            acc = acc + r * r;
        }
    }
    acc * S::c(0.5)
}

/// Clamp of a real to `[0, cap]`: the minimiser of `a r' + a^2/2` over
/// `a in [0, cap]` evaluated at `r' = -r`. Monotone and 1-Lipschitz.
#[inline]
pub fn a_star<S: Real>(r: S, cap: S) -> S {
    r.max(S::zero()).min(cap)
}

/// Base Hamiltonian `H(u) = -1/2 sum_j (u_j)_+^2`; always nonpositive.
pub fn hamiltonian<S: Real>(u: &[S]) -> S {
    let mut acc = S::zero();
    for &v in u {
        let pos = v.max(S::zero());
        acc = acc + pos * pos;
    }
    -acc * S::c(0.5)
}

/// Capped per-state Hamiltonian
/// `sum_{j != i} { a*(w_i - w_j)(w_j - w_i) + a*(w_i - w_j)^2 / 2 }`.
/// Coincides with [`hamiltonian`] of the differences when none exceeds the
/// cap, and is invariant under constant shifts of `w`.
pub fn truncated_hamiltonian<S: Real>(i: usize, w: &[S], cap: S) -> S {
    let mut acc = S::zero();
    for j in 0..w.len() {
        if j != i {
            let a = a_star(w[i] - w[j], cap);
            acc = acc + a * (w[j] - w[i]) + S::c(0.5) * a * a;
        }
    }
    acc
}

/// Mean-field Hamiltonian with boundary repulsion:
/// `sum_i p_i H_i(w) + sum_{i != j} p_i phi(p_j)(w_j - w_i)`.
pub fn mean_field_hamiltonian<S: Real>(p: &[S], w: &[S], cap: S, phi: &Cutoff<S>) -> S {
    let d = p.len();
    let mut acc = S::zero();
    for i in 0..d {
        acc = acc + p[i] * truncated_hamiltonian(i, w, cap);
        for j in 0..d {
            if j != i {
                acc = acc + p[i] * phi.value(p[j]) * (w[j] - w[i]);
            }
        }
    }
    acc
}

/// Gradient in `w` of [`mean_field_hamiltonian`]:
/// `d/dw_i = sum_j p_j (phi(p_i) + a*(w_j - w_i)) - p_i sum_j (phi(p_j) + a*(w_i - w_j))`.
pub fn mean_field_hamiltonian_grad<S: Real>(p: &[S], w: &[S], cap: S, phi: &Cutoff<S>) -> Vec<S> {
    let d = p.len();
    let mut out = vec![S::zero(); d];
    for i in 0..d {
        let mut gain = S::zero();
        let mut loss = S::zero();
        for j in 0..d {
            gain = gain + p[j] * (phi.value(p[i]) + a_star(w[j] - w[i], cap));
            loss = loss + phi.value(p[j]) + a_star(w[i] - w[j], cap);
        }
        out[i] = gain - p[i] * loss;
    }
    out
}

/// Per-state Hamiltonian in chart variables: the capped Hamiltonian applied
/// to the tangent lift of the chart covector.
pub fn chart_hamiltonian<S: Real>(i: usize, z: &[S], cap: S) -> S {
    let w = crate::simplex::chart_to_intrinsic(z);
    truncated_hamiltonian(i, &w, cap)
}

/// Clamp feedback in chart variables (rate from state `i` to state `j`).
pub fn chart_feedback_rate<S: Real>(i: usize, j: usize, z: &[S], cap: S) -> S {
    let m = z.len();
    if i < m && j < m {
        a_star(z[i] - z[j], cap)
    } else if j == m {
        a_star(z[i], cap)
    } else {
        a_star(-z[j], cap)
    }
}

/// Smooth non-increasing boundary repulsion with plateaus: equals
/// `kappa_peak` on `[0, theta]`, `kappa_plateau` on `[2 theta, delta]`, and 0
/// beyond `2 delta`, with cubic C1 blends in between.
#[derive(Clone, Debug)]
pub struct Cutoff<S: Real> {
    theta: S,
    delta: S,
    kappa_plateau: S,
    kappa_peak: S,
}

impl<S: Real> Cutoff<S> {
    pub fn new(theta: S, delta: S, kappa_plateau: S, kappa_peak: S) -> Result<Self> {
        if kappa_peak < kappa_plateau {
            return Err(Error::InvalidModel(
                "non-monotone cutoff: peak level below plateau level".into(),
            ));
        }
        if kappa_plateau < S::zero() || theta < S::zero() || delta <= S::zero() {
            return Err(Error::InvalidModel("cutoff parameters must be nonnegative".into()));
        }
        if S::c(2.0) * theta > delta {
            return Err(Error::InvalidModel("cutoff needs 2 theta <= delta".into()));
        }
        Ok(Cutoff { theta, delta, kappa_plateau, kappa_peak })
    }

    /// Identically zero repulsion.
    pub fn zero() -> Self {
        Cutoff { theta: S::c(0.1), delta: S::c(0.25), kappa_plateau: S::zero(), kappa_peak: S::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.kappa_peak == S::zero()
    }

    pub fn peak(&self) -> S {
        self.kappa_peak
    }

    pub fn support_end(&self) -> S {
        S::c(2.0) * self.delta
    }

    #[inline]
    pub fn value(&self, r: S) -> S {
        if self.is_zero() {
            return S::zero();
        }
        let (t, d) = (self.theta, self.delta);
        if r <= t {
            self.kappa_peak
        } else if r < S::c(2.0) * t {
            let s = (r - t) / t;
            self.kappa_plateau + (self.kappa_peak - self.kappa_plateau) * smooth_down(s)
        } else if r <= d {
            self.kappa_plateau
        } else if r < S::c(2.0) * d {
            let s = (r - d) / d;
            self.kappa_plateau * smooth_down(s)
        } else {
            S::zero()
        }
    }

    #[inline]
    pub fn slope(&self, r: S) -> S {
        if self.is_zero() {
            return S::zero();
        }
        let (t, d) = (self.theta, self.delta);
        if r <= t {
            S::zero()
        } else if r < S::c(2.0) * t {
            let s = (r - t) / t;
            (self.kappa_peak - self.kappa_plateau) * smooth_down_slope(s) / t
        } else if r <= d {
            S::zero()
        } else if r < S::c(2.0) * d {
            let s = (r - d) / d;
            self.kappa_plateau * smooth_down_slope(s) / d
        } else {
            S::zero()
        }
    }
}

/// C1 descent from 1 at `s = 0` to 0 at `s = 1` with flat ends.
#[inline]
fn smooth_down<S: Real>(s: S) -> S {
    (S::one() - s) * (S::one() - s) * (S::one() + S::c(2.0) * s)
}

#[inline]
fn smooth_down_slope<S: Real>(s: S) -> S {
    -S::c(6.0) * s * (S::one() - s)
}

/// Common-noise parameters: intensity, cutoff radii and levels.
#[derive(Clone, Debug)]
pub struct NoiseConfig<S: Real> {
    pub eps: S,
    pub theta: S,
    pub delta: S,
    pub kappa0: S,
    pub kappa2: S,
}

impl<S: Real> NoiseConfig<S> {
    pub fn new(eps: S, theta: S, delta: S, kappa0: S, kappa2: S) -> Result<Self> {
        if eps <= S::zero() || eps > S::one() {
            return Err(Error::InvalidConfig(format!("eps {eps} outside (0, 1]")));
        }
        if !(S::c(2.0) * theta <= delta && delta <= S::c(0.5) && theta > S::zero()) {
            return Err(Error::InvalidConfig(format!(
                "cutoff radii need 0 < 2 theta <= delta <= 1/2, got theta {theta} delta {delta}"
            )));
        }
        let cfg = NoiseConfig { eps, theta, delta, kappa0, kappa2 };
        if cfg.kappa_eps() < kappa0 {
            return Err(Error::InvalidConfig(format!(
                "kappa_eps {} below kappa0 {kappa0} (requires eps^2 <= kappa2/kappa0)",
                cfg.kappa_eps()
            )));
        }
        Ok(cfg)
    }

    /// Noise without boundary repulsion (diagnostic runs).
    pub fn without_repulsion(eps: S) -> Self {
        NoiseConfig { eps, theta: S::c(0.05), delta: S::c(0.25), kappa0: S::zero(), kappa2: S::zero() }
    }

    /// Peak repulsion level `kappa2 / eps^2`.
    pub fn kappa_eps(&self) -> S {
        self.kappa2 / (self.eps * self.eps)
    }

    pub fn cutoff(&self) -> Cutoff<S> {
        Cutoff {
            theta: self.theta,
            delta: self.delta,
            kappa_plateau: self.kappa0,
            kappa_peak: self.kappa_eps(),
        }
    }
}

/// Problem data: state count, horizon, costs, optional potentials, cap.
#[derive(Clone)]
pub struct ModelSpec<S: Real> {
    pub d: usize,
    pub horizon: S,
    running: StateFn<S>,
    terminal: StateFn<S>,
    running_potential: Option<PotentialFn<S>>,
    terminal_potential: Option<PotentialFn<S>>,
    cap: S,
    sup_norm_samples: usize,
    pub label: String,
}

impl<S: Real> ModelSpec<S> {
    /// Builds a model; estimates the cap `M = 2(|g|_inf + T |f|_inf)` on a
    /// dense sample when not supplied, and validates the potential/cost
    /// compatibility residual when potentials are present.
    pub fn new(
        d: usize,
        horizon: S,
        running: StateFn<S>,
        terminal: StateFn<S>,
        running_potential: Option<PotentialFn<S>>,
        terminal_potential: Option<PotentialFn<S>>,
        cap: Option<S>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidModel("need at least two states".into()));
        }
        if horizon <= S::zero() {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        let mut spec = ModelSpec {
            d,
            horizon,
            running,
            terminal,
            running_potential,
            terminal_potential,
            cap: S::zero(),
            sup_norm_samples: 0,
            label: label.into(),
        };
        match cap {
            Some(m) => {
                if m <= S::zero() {
                    return Err(Error::InvalidModel("cap must be positive".into()));
                }
                spec.cap = m;
            }
            None => {
                let (f_sup, g_sup, samples) = spec.sample_sup_norms();
                spec.cap = S::c(2.0) * (g_sup + horizon * f_sup);
                spec.sup_norm_samples = samples;
                if spec.cap <= S::zero() {
                    spec.cap = S::one(); // zero-cost model: any positive cap works
                }
            }
        }
        spec.check_potentials()?;
        Ok(spec)
    }

    /// Built-in two-state benchmark: zero running cost, antisymmetric linear
    /// terminal cost, quadratic terminal potential. Cap is 2 for any horizon.
    pub fn builtin_d2(horizon: S) -> Self {
        let running: StateFn<S> = Arc::new(|_p| vec![S::zero(), S::zero()]);
        let terminal: StateFn<S> = Arc::new(|p: &SimplexPoint<S>| {
            let m = S::c(2.0) * p.get(0) - S::one();
            vec![-m, m]
        });
        let run_pot: PotentialFn<S> = Arc::new(|_p| S::zero());
        let term_pot: PotentialFn<S> =
            Arc::new(|p: &SimplexPoint<S>| S::c(2.0) * p.get(0) * p.get(1));
        ModelSpec::new(
            2,
            horizon,
            running,
            terminal,
            Some(run_pot),
            Some(term_pot),
            Some(S::c(2.0)),
            "d2_paper",
        )
        .expect("builtin model is valid")
    }

    pub fn running_cost(&self, p: &SimplexPoint<S>) -> Vec<S> {
        (self.running)(p)
    }

    pub fn terminal_cost(&self, p: &SimplexPoint<S>) -> Vec<S> {
        (self.terminal)(p)
    }

    pub fn has_potentials(&self) -> bool {
        self.running_potential.is_some() && self.terminal_potential.is_some()
    }

    /// Scalar running potential; falls back to `<p, f(p)>`-free zero when the
    /// model was built without one (callers should check `has_potentials`).
    pub fn running_potential(&self, p: &SimplexPoint<S>) -> S {
        match &self.running_potential {
            Some(f) => f(p),
            None => S::zero(),
        }
    }

    pub fn terminal_potential(&self, p: &SimplexPoint<S>) -> S {
        match &self.terminal_potential {
            Some(g) => g(p),
            None => S::zero(),
        }
    }

    pub fn cap(&self) -> S {
        self.cap
    }

    pub fn sup_norm_samples(&self) -> usize {
        self.sup_norm_samples
    }

    fn sample_points(&self, mesh: f64) -> Vec<SimplexPoint<S>> {
        let n = (1.0 / mesh).round() as usize;
        let mut pts = Vec::new();
        match self.d {
            2 => {
                for k in 0..=n {
                    let x = S::from_usize(k).unwrap() / S::from_usize(n).unwrap();
                    pts.push(ChartPoint::new(vec![x]).unwrap().from_chart());
                }
            }
            3 => {
                for k1 in 0..=n {
                    for k2 in 0..=(n - k1) {
                        let nf = S::from_usize(n).unwrap();
                        let x = vec![
                            S::from_usize(k1).unwrap() / nf,
                            S::from_usize(k2).unwrap() / nf,
                        ];
                        pts.push(ChartPoint::new(x).unwrap().from_chart());
                    }
                }
            }
            d => {
                // quasi-random interior sample for higher dimensions
                for s in 0..2000u64 {
                    let mut x = vec![S::zero(); d];
                    let mut sum = S::zero();
                    for (j, xj) in x.iter_mut().enumerate() {
                        let u = crate::rng::uniform_at(17, s, j as u64, 0);
                        *xj = S::c(-(u.ln()));
                        sum = sum + *xj;
                    }
                    for xj in x.iter_mut() {
                        *xj = *xj / sum;
                    }
                    pts.push(SimplexPoint::new(x).unwrap());
                }
            }
        }
        pts
    }

    fn sample_sup_norms(&self) -> (S, S, usize) {
        let pts = self.sample_points(0.01_f64.max(if self.d > 3 { 0.05 } else { 0.01 }));
        let mut f_sup = S::zero();
        let mut g_sup = S::zero();
        for p in &pts {
            for v in self.running_cost(p) {
                f_sup = f_sup.max(v.abs());
            }
            for v in self.terminal_cost(p) {
                g_sup = g_sup.max(v.abs());
            }
        }
        (f_sup, g_sup, pts.len())
    }

    /// Max over a test grid of the potential/cost compatibility residual
    /// `|d_i F(p) - (f_i(p) - mean f(p))|` (and the terminal pair).
    pub fn potential_residual(&self) -> Result<S> {
        let fd = S::c(1e-5);
        let pts = self.sample_points(0.05);
        let mut worst = S::zero();
        for p in pts.iter().filter(|p| p.is_interior(S::c(2e-5))) {
            if let Some(fp) = &self.running_potential {
                let g = intrinsic_gradient(|q| fp(&SimplexPoint::new(q.to_vec()).unwrap()), p, fd)?;
                worst = worst.max(centred_residual(&g, &self.running_cost(p)));
            }
            if let Some(gp) = &self.terminal_potential {
                let g = intrinsic_gradient(|q| gp(&SimplexPoint::new(q.to_vec()).unwrap()), p, fd)?;
                worst = worst.max(centred_residual(&g, &self.terminal_cost(p)));
            }
        }
        Ok(worst)
    }

    fn check_potentials(&self) -> Result<()> {
        if self.running_potential.is_none() && self.terminal_potential.is_none() {
            return Ok(());
        }
        let r = self.potential_residual()?;
        if r > S::c(POTENTIAL_RESIDUAL_TOL) {
            return Err(Error::InvalidModel(format!(
                "potential residual {r} exceeds {POTENTIAL_RESIDUAL_TOL}"
            )));
        }
        Ok(())
    }
}

fn centred_residual<S: Real>(grad: &[S], cost: &[S]) -> S {
    let d = S::from_usize(cost.len()).unwrap();
    let mean: S = cost.iter().copied().sum::<S>() / d;
    grad.iter()
        .zip(cost)
        .map(|(&gi, &ci)| (gi - (ci - mean)).abs())
        .fold(S::zero(), |a, b| a.max(b))
}

/// Reconstructs a two-state scalar potential from the pair of per-state
/// costs: integrates their difference along the first coordinate.
pub fn two_state_potential<S: Real>(
    cost: [Arc<dyn Fn(S) -> S + Send + Sync>; 2],
) -> PotentialFn<S> {
    Arc::new(move |p: &SimplexPoint<S>| {
        // Simpson quadrature of (cost_1 - cost_2)(q) over [0, p_1]
        let upper = p.get(0);
        let panels = 64usize;
        let step = upper / S::from_usize(panels).unwrap();
        if step == S::zero() {
            return S::zero();
        }
        let diff = |q: S| cost[0](q) - cost[1](q);
        let mut acc = diff(S::zero()) + diff(upper);
        for k in 1..panels {
            let q = step * S::from_usize(k).unwrap();
            let w = if k % 2 == 1 { S::c(4.0) } else { S::c(2.0) };
            acc = acc + w * diff(q);
        }
        acc * step / S::c(3.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn lagrangian_values() {
        let mut a = ControlMatrix::<f64>::zero(2);
        assert_eq!(lagrangian(0, &a), 0.0);
        a.set_rate(0, 1, 2.0);
        assert_eq!(lagrangian(0, &a), 2.0);
        let mut b = ControlMatrix::<f64>::zero(3);
        b.set_rate(0, 1, 1.0);
        b.set_rate(0, 2, 2.0);
        assert_eq!(lagrangian(0, &b), 2.5);
        // diagonal consistency: rows sum to zero exactly
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| b.rate(i, j)).sum();
            assert_eq!(row, 0.0);
        }
    }

    #[test]
    fn clamp_branches() {
        assert_eq!(a_star(-1.0, 2.0), 0.0);
        assert_eq!(a_star(0.5, 2.0), 0.5);
        assert_eq!(a_star(3.0, 2.0), 2.0);
    }

    #[test]
    fn base_hamiltonian_values() {
        assert_eq!(hamiltonian::<f64>(&[0.0, 0.0]), 0.0);
        assert_eq!(hamiltonian(&[1.0, -1.0]), -0.5);
        assert_eq!(hamiltonian(&[2.0, 3.0]), -6.5);
        assert!(hamiltonian(&[0.3, -2.0, 5.0]) <= 0.0);
    }

    #[test]
    fn truncated_hamiltonian_values() {
        // constant vector: zero
        assert_eq!(truncated_hamiltonian(0, &[3.0f64, 3.0, 3.0], 2.0), 0.0);
        // unconstrained regime equals the base Hamiltonian of differences
        let w = [1.0f64, 0.0];
        let diffs = [w[0] - w[0], w[0] - w[1]];
        assert_abs_diff_eq!(truncated_hamiltonian(0, &w, 2.0), hamiltonian(&diffs));
        assert_abs_diff_eq!(truncated_hamiltonian(0, &w, 2.0), -0.5);
        // capped regime
        let w = [5.0f64, 0.0];
        assert_abs_diff_eq!(truncated_hamiltonian(0, &w, 2.0), 2.0 * (-5.0) + 0.5 * 4.0);
    }

    /// Brute-force the row minimisation over a 101-point control grid.
    fn brute_force_row(i: usize, w: &[f64], cap: f64) -> (f64, Vec<f64>) {
        let others: Vec<usize> = (0..w.len()).filter(|&j| j != i).collect();
        let grid: Vec<f64> = (0..=100).map(|k| cap * k as f64 / 100.0).collect();
        let mut best = f64::INFINITY;
        let mut arg = vec![0.0; others.len()];
        let mut idx = vec![0usize; others.len()];
        loop {
            let mut cost = 0.0;
            for (slot, &j) in others.iter().enumerate() {
                let a = grid[idx[slot]];
                cost += a * (w[j] - w[i]) + 0.5 * a * a;
            }
            if cost < best {
                best = cost;
                for (slot, _) in others.iter().enumerate() {
                    arg[slot] = grid[idx[slot]];
                }
            }
            let mut carry = 0;
            loop {
                if carry == idx.len() {
                    return (best, arg);
                }
                idx[carry] += 1;
                if idx[carry] <= 100 {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
        }
    }

    #[test]
    fn truncated_hamiltonian_matches_brute_force() {
        let cases: Vec<(usize, Vec<f64>)> = vec![
            (0, vec![1.0, 0.0]),
            (1, vec![5.0, 0.0]),
            (0, vec![0.4, -1.2, 2.0]),
            (2, vec![-0.7, 0.9, 0.1]),
        ];
        for (i, w) in cases {
            let cap = 2.0;
            let (bf, arg) = brute_force_row(i, &w, cap);
            let analytic = truncated_hamiltonian(i, &w, cap);
            assert!((bf - analytic).abs() <= 1e-4, "gap {} at {:?}", bf - analytic, w);
            // argmin agreement with the clamp, up to grid resolution
            let others: Vec<usize> = (0..w.len()).filter(|&j| j != i).collect();
            for (slot, &j) in others.iter().enumerate() {
                assert!((arg[slot] - a_star(w[i] - w[j], cap)).abs() <= cap / 100.0 + 1e-12);
            }
        }
    }

    #[test]
    fn mean_field_hamiltonian_composition() {
        let p = [0.5f64, 0.3, 0.2];
        let w = [0.4f64, -0.2, 0.1];
        let phi = Cutoff::zero();
        // phi == 0 and constant w: zero
        assert_eq!(mean_field_hamiltonian(&p, &[1.0, 1.0, 1.0], 2.0, &phi), 0.0);
        // phi == 0: weighted sum of per-state Hamiltonians
        let want: f64 = (0..3).map(|i| p[i] * truncated_hamiltonian(i, &w, 2.0)).sum();
        assert_abs_diff_eq!(mean_field_hamiltonian(&p, &w, 2.0, &phi), want, epsilon = 1e-14);
    }

    #[test]
    fn mean_field_hamiltonian_grad_matches_differences() {
        let cfg = NoiseConfig::new(0.5f64, 0.05, 0.2, 1.0, 4.0).unwrap();
        let phi = cfg.cutoff();
        let cap = 2.0;
        let mut checked = 0;
        let mut s = 0u64;
        while checked < 200 {
            s += 1;
            let d = 3;
            let mut p = vec![0.0f64; d];
            let mut sum = 0.0;
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = -(crate::rng::uniform_at(3, s, j as u64, 0)).ln();
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= sum;
            }
            let w: Vec<f64> = (0..d)
                .map(|j| 6.0 * crate::rng::uniform_at(4, s, j as u64, 0) - 3.0)
                .collect();
            // skip samples near the clamp kinks
            let mut near_kink = false;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        let r = w[i] - w[j];
                        if r.abs() < 1e-3 || (r - cap).abs() < 1e-3 {
                            near_kink = true;
                        }
                    }
                }
            }
            if near_kink {
                continue;
            }
            checked += 1;
            let grad = mean_field_hamiltonian_grad(&p, &w, cap, &phi);
            let step = 1e-5;
            for i in 0..d {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += step;
                wm[i] -= step;
                let fd = (mean_field_hamiltonian(&p, &wp, cap, &phi)
                    - mean_field_hamiltonian(&p, &wm, cap, &phi))
                    / (2.0 * step);
                assert!((grad[i] - fd).abs() <= 1e-6, "i={i} grad {} fd {}", grad[i], fd);
            }
        }
    }

    #[test]
    fn cutoff_plateaus_and_envelope() {
        let cfg = NoiseConfig::new(0.1f64, 0.05, 0.2, 1.0, 5.0).unwrap();
        let peak = cfg.kappa_eps();
        assert_abs_diff_eq!(peak, 500.0, epsilon = 1e-9);
        let phi = cfg.cutoff();
        assert_eq!(phi.value(0.0), peak);
        assert_eq!(phi.value(cfg.delta), 1.0);
        assert_eq!(phi.value(3.0 * cfg.delta), 0.0);
        // non-increasing scan and derivative envelope
        let mut prev = f64::INFINITY;
        for k in 0..=10_000 {
            let r = 0.5 * k as f64 / 10_000.0;
            let v = phi.value(r);
            assert!(v <= prev + 1e-12, "not monotone at r={r}");
            prev = v;
            let envelope = if r <= 2.0 * cfg.theta { 2.0 * peak / cfg.theta } else { 0.0 }
                + if r <= 2.0 * cfg.delta { 2.0 * 1.0 / cfg.delta } else { 0.0 };
            assert!(phi.slope(r).abs() <= envelope + 1e-12, "envelope violated at r={r}");
        }
        // rejected non-monotone configuration
        assert!(NoiseConfig::new(1.0f64, 0.05, 0.2, 10.0, 5.0).is_err());
    }

    #[test]
    fn builtin_model() {
        let m = ModelSpec::<f64>::builtin_d2(3.0);
        assert_eq!(m.cap(), 2.0);
        let half = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(m.terminal_potential(&half), 0.5);
        // potential residual on a fine grid
        let mut worst: f64 = 0.0;
        for k in 1..200 {
            let p1 = k as f64 / 200.0;
            let p = SimplexPoint::new(vec![p1, 1.0 - p1]).unwrap();
            let g = intrinsic_gradient(
                |q: &[f64]| 2.0 * q[0] * q[1],
                &p,
                1e-6,
            )
            .unwrap();
            let cost = m.terminal_cost(&p);
            let mean = (cost[0] + cost[1]) / 2.0;
            for i in 0..2 {
                worst = worst.max((g[i] - (cost[i] - mean)).abs());
            }
        }
        assert!(worst <= 1e-10, "residual {worst}");
    }

    #[test]
    fn two_state_potential_reconstruction() {
        // paper-style pair: g1 = -(2p-1), g2 = 2p-1 gives 2 p1 p2 up to a constant
        let pot = two_state_potential::<f64>([
            Arc::new(|q| -(2.0 * q - 1.0)),
            Arc::new(|q| 2.0 * q - 1.0),
        ]);
        for k in 0..=20 {
            let p1 = k as f64 / 20.0;
            let p = SimplexPoint::new(vec![p1, 1.0 - p1]).unwrap();
            // integral of -2(2q-1) from 0 to p1 = 2 p1 (1 - p1) - 0
            assert_abs_diff_eq!(pot(&p), 2.0 * p1 * (1.0 - p1), epsilon = 1e-9);
        }
        // zero costs give the zero potential
        let zero = two_state_potential::<f64>([Arc::new(|_| 0.0), Arc::new(|_| 0.0)]);
        assert_eq!(zero(&SimplexPoint::new(vec![0.3, 0.7]).unwrap()), 0.0);
        // constant difference gives a linear potential
        let lin = two_state_potential::<f64>([Arc::new(|_| 2.0), Arc::new(|_| 0.0)]);
        let p = SimplexPoint::new(vec![0.4, 0.6]).unwrap();
        assert_abs_diff_eq!(lin(&p), 0.8, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn shift_invariance(w in proptest::collection::vec(-4.0f64..4.0, 2..5), c in -3.0f64..3.0) {
            let shifted: Vec<f64> = w.iter().map(|v| v + c).collect();
            for i in 0..w.len() {
                let a = truncated_hamiltonian(i, &w, 2.0);
                let b = truncated_hamiltonian(i, &shifted, 2.0);
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn clamp_monotone_lipschitz(r1 in -5.0f64..5.0, r2 in -5.0f64..5.0) {
            let (a, b) = (a_star(r1, 2.0), a_star(r2, 2.0));
            if r1 <= r2 { prop_assert!(a <= b); }
            prop_assert!((a - b).abs() <= (r1 - r2).abs());
        }
    }
}
