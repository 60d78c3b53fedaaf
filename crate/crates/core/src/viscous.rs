//! Common-noise layer: the degenerate-parabolic planner equation on the
//! simplex, extraction of its intrinsic gradient, the auxiliary mean-value
//! equation, the correction cost that restores the potential structure, the
//! reconstructed per-state value field, and Monte-Carlo simulation of the
//! noise-driven dynamics.
//!
//! All grid solvers use the same explicit stencil: first-order terms are
//! upwinded along state-exchange edges (coefficient `p_i * rate`, which
//! vanishes exactly when the edge would leave the lattice), and the
//! degenerate second-order term is split into axis and edge directional
//! second differences with nonnegative coefficients `x_j x_slack` and
//! `x_j x_k`, so boundary nodes never read exterior values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{a_star, lagrangian, ControlMatrix, ModelSpec, NoiseConfig};
use crate::parallel::Workers;
use crate::scalar::Real;
use crate::simplex::{GridField, SimplexGrid, SimplexPoint};

/// Bundle of the viscous fields produced by the solve pipeline.
pub struct ViscousFields<S: Real> {
    /// Scalar planner value.
    pub value: GridField<S>,
    /// Intrinsic gradient of the value (width `d`).
    pub gradient: GridField<S>,
    /// Population-mean value (scalar).
    pub mean_value: GridField<S>,
    /// Correction running cost (width `d`).
    pub correction: GridField<S>,
    /// Reconstructed per-state values (width `d`).
    pub state_value: GridField<S>,
    /// Interior cross-derivative symmetry residual of the gradient.
    pub schwarz_residual: S,
    /// Internal time step used by the explicit schemes.
    pub dt_internal: S,
}

/// Largest stable explicit step at mesh width `h`: the parabolic bound
/// `h^2/(eps^2 d)` capped by `h` over the drift bound `d(M + kappa_eps) + eps^2`.
pub fn cfl_step<S: Real>(model: &ModelSpec<S>, cfg: &NoiseConfig<S>, h: S) -> S {
    let d = S::from_usize(model.d).unwrap();
    let eps2 = cfg.eps * cfg.eps;
    let parabolic = h * h / (eps2 * d);
    let drift_bound = d * (model.cap() + cfg.kappa_eps()) + eps2;
    parabolic.min(h / drift_bound)
}

/// Nonnegative-coefficient discretisation of transport + degenerate
/// diffusion at one node, reading the `comp` component of `prev`.
/// `rate(i, j)` is the jump rate from state `i` to state `j`.
fn stencil_apply<S: Real>(
    prev: &GridField<S>,
    slice: usize,
    node: usize,
    comp: usize,
    p: &[S],
    rate: &dyn Fn(usize, usize) -> S,
    eps: S,
) -> S {
    let grid = &prev.grid;
    let d = p.len();
    let m = d - 1;
    let h = grid.h();
    let centre = prev.at(slice, node, comp);
    let mut acc = S::zero();
    // edge-upwind transport: mass moving i -> j sees the value one edge over
    for i in 0..d {
        if p[i] == S::zero() {
            continue;
        }
        for j in 0..d {
            if i == j {
                continue;
            }
            let r = rate(i, j);
            if r == S::zero() {
                continue;
            }
            let nb = grid
                .edge_neighbor(node, i, j)
                .expect("edge neighbor exists whenever the source mass is positive");
            acc = acc + p[i] * r * (prev.at(slice, nb, comp) - centre) / h;
        }
    }
    if eps > S::zero() {
        let half_eps2 = S::c(0.5) * eps * eps;
        let slack = S::one() - p[..m].iter().copied().sum::<S>();
        // axis second differences, weight x_j * slack
        for a in 0..m {
            let w = p[a] * slack;
            if w > S::zero() {
                let up = grid.neighbor(node, a, 1).expect("axis stencil inside");
                let dn = grid.neighbor(node, a, -1).expect("axis stencil inside");
                acc = acc
                    + half_eps2 * w
                        * (prev.at(slice, up, comp) - S::c(2.0) * centre
                            + prev.at(slice, dn, comp))
                        / (h * h);
            }
        }
        // edge-direction second differences, weight x_a * x_b
        for a in 0..m {
            for b in (a + 1)..m {
                let w = p[a] * p[b];
                if w > S::zero() {
                    let mut delta = vec![0i32; m];
                    delta[a] = 1;
                    delta[b] = -1;
                    let up = grid.shifted(node, &delta).expect("edge stencil inside");
                    delta[a] = -1;
                    delta[b] = 1;
                    let dn = grid.shifted(node, &delta).expect("edge stencil inside");
                    acc = acc
                        + half_eps2 * w
                            * (prev.at(slice, up, comp) - S::c(2.0) * centre
                                + prev.at(slice, dn, comp))
                            / (h * h);
                }
            }
        }
    }
    acc
}

/// Explicit backward solve of the viscous planner equation. `dt_request`
/// must satisfy both CFL bounds (`h^2/(eps^2 d)` and `h` over the drift
/// bound); the field is stored on `store_steps + 1` uniform slices while the
/// scheme steps internally at (a divisor of) the requested step.
pub fn hjb_solve_viscous<S: Real>(
    model: &ModelSpec<S>,
    cfg: &NoiseConfig<S>,
    grid: Arc<SimplexGrid<S>>,
    dt_request: S,
    store_steps: usize,
) -> Result<GridField<S>> {
    if !model.has_potentials() {
        return Err(Error::InvalidModel("viscous planner value needs potentials".into()));
    }
    let limit = cfl_step(model, cfg, grid.h());
    if dt_request > limit {
        return Err(Error::Cfl(format!("dt {dt_request} exceeds the stability bound {limit}")));
    }
    let phi = cfg.cutoff();
    let cap = model.cap();
    let d = model.d;
    let times = GridField::<S>::time_mesh(S::zero(), model.horizon, store_steps);
    let dt_out = times[1] - times[0];
    let n_sub = (dt_out / dt_request).ceil().to_f64_lossy() as usize;
    let dt = dt_out / S::from_usize(n_sub.max(1)).unwrap();
    let nt = times.len();
    let mut field = GridField::zeros(grid.clone(), times, 1);
    for node in 0..grid.len() {
        field.set(nt - 1, node, 0, model.terminal_potential(&grid.point(node)));
    }
    // rolling buffers over the internal sub-steps
    let mut prev = GridField::zeros(grid.clone(), vec![S::zero()], 1);
    prev.raw_mut().copy_from_slice(field.time_slice(nt - 1));
    let mut next = prev.clone();
    for k in (0..nt - 1).rev() {
        for _ in 0..n_sub {
            for node in 0..grid.len() {
                let p = grid.point(node);
                let pc = p.coords();
                let w = prev.intrinsic_gradient_at(0, node, 0, 1);
                let rates = ControlMatrix::from_values(&w, cap);
                let phi_at: Vec<S> = pc.iter().map(|&v| phi.value(v)).collect();
                let mut running = model.running_potential(&p);
                for i in 0..d {
                    running = running + pc[i] * lagrangian(i, &rates);
                }
                let rate = |i: usize, j: usize| rates.rate(i, j) + phi_at[j];
                let flow = stencil_apply(&prev, 0, node, 0, pc, &rate, cfg.eps);
                let v = prev.at(0, node, 0) + dt * (running + flow);
                if !v.is_finite() {
                    return Err(Error::Solver(format!(
                        "non-finite value at node {node} (t-slice {k})"
                    )));
                }
                next.set(0, node, 0, v);
            }
            std::mem::swap(&mut prev, &mut next);
        }
        field.time_slice_mut(k).copy_from_slice(prev.time_slice(0));
    }
    Ok(field)
}

/// Intrinsic gradient of a scalar grid field plus the interior Schwarz
/// (cross-derivative symmetry) residual of its chart representation.
pub fn extract_gradient<S: Real>(value: &GridField<S>) -> (GridField<S>, S) {
    let gradient = value.gradient_field(0, 1);
    let grid = &value.grid;
    let m = grid.chart_dim();
    let mut worst = S::zero();
    if m >= 2 {
        for t in 0..value.times.len() {
            for node in 0..grid.len() {
                if !grid.is_interior(node) {
                    continue;
                }
                // chart gradient components and their cross-derivatives
                for a in 0..m {
                    for b in (a + 1)..m {
                        let da = cross_chart_derivative(value, t, node, a, b);
                        let db = cross_chart_derivative(value, t, node, b, a);
                        if let (Some(da), Some(db)) = (da, db) {
                            worst = worst.max((da - db).abs());
                        }
                    }
                }
            }
        }
    }
    (gradient, worst)
}

/// d/dx_b of the central-difference d/dx_a, when all four neighbours exist.
fn cross_chart_derivative<S: Real>(
    field: &GridField<S>,
    t: usize,
    node: usize,
    a: usize,
    b: usize,
) -> Option<S> {
    let grid = &field.grid;
    let h = grid.h();
    let up = grid.neighbor(node, b, 1)?;
    let dn = grid.neighbor(node, b, -1)?;
    let ga = |n: usize| -> Option<S> {
        let u = grid.neighbor(n, a, 1)?;
        let l = grid.neighbor(n, a, -1)?;
        Some((field.at(t, u, 0) - field.at(t, l, 0)) / (S::c(2.0) * h))
    };
    Some((ga(up)? - ga(dn)?) / (S::c(2.0) * h))
}

/// Explicit solve of the linear mean-value equation: transport along the
/// equilibrium rates, the same degenerate diffusion, and the quadratic
/// control + repulsion-slope + running-cost sources. Terminal datum is
/// `<p, g(p)>`.
pub fn solve_mean_value<S: Real>(
    gradient: &GridField<S>,
    model: &ModelSpec<S>,
    cfg: &NoiseConfig<S>,
    dt_request: S,
) -> Result<GridField<S>> {
    let grid = gradient.grid.clone();
    let limit = cfl_step(model, cfg, grid.h());
    if dt_request > limit {
        return Err(Error::Cfl(format!("dt {dt_request} exceeds the stability bound {limit}")));
    }
    let phi = cfg.cutoff();
    let cap = model.cap();
    let d = model.d;
    let times = gradient.times.clone();
    let nt = times.len();
    let dt_out = times[1] - times[0];
    let n_sub = (dt_out / dt_request).ceil().to_f64_lossy() as usize;
    let dt = dt_out / S::from_usize(n_sub.max(1)).unwrap();
    let mut field = GridField::zeros(grid.clone(), times.clone(), 1);
    for node in 0..grid.len() {
        let p = grid.point(node);
        let g = model.terminal_cost(&p);
        let datum: S = p.coords().iter().zip(&g).map(|(&a, &b)| a * b).sum();
        field.set(nt - 1, node, 0, datum);
    }
    let mut prev = GridField::zeros(grid.clone(), vec![S::zero()], 1);
    prev.raw_mut().copy_from_slice(field.time_slice(nt - 1));
    let mut next = prev.clone();
    for k in (0..nt - 1).rev() {
        for sub in 0..n_sub {
            // time weight for the gradient lookup inside the outer interval
            let frac = S::from_usize(n_sub - sub).unwrap() / S::from_usize(n_sub).unwrap();
            for node in 0..grid.len() {
                let p = grid.point(node);
                let pc = p.coords();
                let v: Vec<S> = (0..d)
                    .map(|c| {
                        let hi = gradient.at(k + 1, node, c);
                        let lo = gradient.at(k, node, c);
                        frac * hi + (S::one() - frac) * lo
                    })
                    .collect();
                let phi_at: Vec<S> = pc.iter().map(|&x| phi.value(x)).collect();
                let rate =
                    |i: usize, j: usize| phi_at[j] + a_star(v[i] - v[j], cap);
                let flow = stencil_apply(&prev, 0, node, 0, pc, &rate, cfg.eps);
                // sources: quadratic control, repulsion slope, running cost
                let mut source = S::zero();
                let f = model.running_cost(&p);
                for j in 0..d {
                    source = source + pc[j] * f[j];
                    for l in 0..d {
                        let a = a_star(v[j] - v[l], cap);
                        source = source + S::c(0.5) * pc[j] * a * a;
                        source =
                            source + pc[j] * pc[l] * phi.slope(pc[j]) * (v[j] - v[l]);
                    }
                }
                let y = prev.at(0, node, 0) + dt * (flow + source);
                if !y.is_finite() {
                    return Err(Error::Solver(format!("non-finite mean value at node {node}")));
                }
                next.set(0, node, 0, y);
            }
            std::mem::swap(&mut prev, &mut next);
        }
        field.time_slice_mut(k).copy_from_slice(prev.time_slice(0));
    }
    Ok(field)
}

/// Correction cost and its intermediates.
pub struct CorrectionFields<S: Real> {
    /// The per-state correction running cost (width `d`).
    pub theta: GridField<S>,
    /// Diffusion loading of the gradient: width `d^3`, index `(i d + j) d + k`.
    pub w_loading: GridField<S>,
    /// Mean-value mismatch loading: width `d^2`, index `i d + j`.
    pub upsilon: GridField<S>,
}

/// Evaluates the correction cost
/// `theta_i = sum_j p_j phi'(p_i)(V_i - V_j)
///  + eps^2/2 sum_j p_j (d_j V_j - d_i V_i)
///  + eps^2 sum_j p_j (d_j Y - d_i Y - (V_j - V_i))
///  + eps^2 sum_{j,k} p_j p_k (d_i V_k - d_j V_k)`
/// with nested derivatives of the gradient taken at double mesh width.
pub fn correction_cost<S: Real>(
    gradient: &GridField<S>,
    mean_value: &GridField<S>,
    cfg: &NoiseConfig<S>,
) -> CorrectionFields<S> {
    let grid = gradient.grid.clone();
    let d = grid.states();
    let times = gradient.times.clone();
    let phi = cfg.cutoff();
    let eps = cfg.eps;
    let eps2 = eps * eps;
    let mut theta = GridField::zeros(grid.clone(), times.clone(), d);
    let mut w_loading = GridField::zeros(grid.clone(), times.clone(), d * d * d);
    let mut upsilon = GridField::zeros(grid.clone(), times.clone(), d * d);
    let sqrt2_inv = S::one() / S::c(2.0).sqrt();
    for t in 0..times.len() {
        for node in 0..grid.len() {
            let p = grid.point(node);
            let pc = p.coords();
            let v: Vec<S> = (0..d).map(|c| gradient.at(t, node, c)).collect();
            // nested derivatives: dv[i][j] = d_j V^i, at stride 2
            let dv: Vec<Vec<S>> =
                (0..d).map(|i| gradient.intrinsic_gradient_at(t, node, i, 2)).collect();
            let dy = mean_value.intrinsic_gradient_at(t, node, 0, 1);
            for i in 0..d {
                let mut acc = S::zero();
                let slope_i = phi.slope(pc[i]);
                for j in 0..d {
                    acc = acc + pc[j] * slope_i * (v[i] - v[j]);
                    acc = acc + S::c(0.5) * eps2 * pc[j] * (dv[j][j] - dv[i][i]);
                    acc = acc + eps2 * pc[j] * (dy[j] - dy[i] - (v[j] - v[i]));
                    for k in 0..d {
                        acc = acc + eps2 * pc[j] * pc[k] * (dv[k][i] - dv[k][j]);
                    }
                }
                theta.set(t, node, i, acc);
                for j in 0..d {
                    let ups = eps
                        * sqrt2_inv
                        * (pc[i] * pc[j]).sqrt()
                        * (dy[i] - dy[j] - (v[i] - v[j]));
                    upsilon.set(t, node, i * d + j, ups);
                    for k in 0..d {
                        let w = eps * sqrt2_inv * (pc[j] * pc[k]).sqrt() * (dv[i][j] - dv[i][k]);
                        w_loading.set(t, node, (i * d + j) * d + k, w);
                    }
                }
            }
        }
    }
    CorrectionFields { theta, w_loading, upsilon }
}

/// Per-state value field `U_i = V_i - <p, V> + Y`; differences of components
/// reproduce differences of the gradient by construction, and the terminal
/// slice reproduces the terminal cost up to the gradient's mesh error.
pub fn reconstruct_state_values<S: Real>(
    gradient: &GridField<S>,
    mean_value: &GridField<S>,
) -> GridField<S> {
    let grid = gradient.grid.clone();
    let d = grid.states();
    let mut out = GridField::zeros(grid.clone(), gradient.times.clone(), d);
    for t in 0..gradient.times.len() {
        for node in 0..grid.len() {
            let p = grid.point(node);
            let mut avg = S::zero();
            for c in 0..d {
                avg = avg + p.get(c) * gradient.at(t, node, c);
            }
            let shift = mean_value.at(t, node, 0) - avg;
            for c in 0..d {
                out.set(t, node, c, gradient.at(t, node, c) + shift);
            }
        }
    }
    out
}

/// Full viscous pipeline: value, gradient, mean value, correction, state
/// values.
pub fn solve_viscous_fields<S: Real>(
    model: &ModelSpec<S>,
    cfg: &NoiseConfig<S>,
    grid: Arc<SimplexGrid<S>>,
    store_steps: usize,
) -> Result<ViscousFields<S>> {
    let dt = cfl_step(model, cfg, grid.h()) * S::c(0.9);
    let value = hjb_solve_viscous(model, cfg, grid.clone(), dt, store_steps)?;
    let (gradient, schwarz_residual) = extract_gradient(&value);
    let mean_value = solve_mean_value(&gradient, model, cfg, dt)?;
    let correction = correction_cost(&gradient, &mean_value, cfg);
    let state_value = reconstruct_state_values(&gradient, &mean_value);
    Ok(ViscousFields {
        value,
        gradient,
        mean_value,
        correction: correction.theta,
        state_value,
        schwarz_residual,
        dt_internal: dt,
    })
}

/// Interior residual of the per-state value field in the master equation,
/// evaluated with finite differences on the stored mesh. Returns the maximum
/// over interior nodes and interior time slices.
pub fn master_equation_residual<S: Real>(
    fields: &ViscousFields<S>,
    model: &ModelSpec<S>,
    cfg: &NoiseConfig<S>,
) -> S {
    let field = master_equation_residual_field(fields, model, cfg);
    let mut worst = S::zero();
    for t in 0..field.times.len() {
        for node in 0..field.grid.len() {
            for c in 0..field.width {
                worst = worst.max(field.at(t, node, c).abs());
            }
        }
    }
    worst
}

/// Per-(time, node, state) master-equation residual (zero on the first and
/// last slices and at non-interior nodes, where the stencils do not fit).
pub fn master_equation_residual_field<S: Real>(
    fields: &ViscousFields<S>,
    model: &ModelSpec<S>,
    cfg: &NoiseConfig<S>,
) -> GridField<S> {
    let u = &fields.state_value;
    let grid = &u.grid;
    let d = grid.states();
    let m = grid.chart_dim();
    let h = grid.h();
    let phi = cfg.cutoff();
    let cap = model.cap();
    let eps2 = cfg.eps * cfg.eps;
    let nt = u.times.len();
    let dt = u.times[1] - u.times[0];
    let mut out = GridField::zeros(grid.clone(), u.times.clone(), d);
    for t in 1..nt - 1 {
        for node in 0..grid.len() {
            // needs a full interior stencil at stride 1
            if !(grid.is_interior(node)
                && grid.multi_index(node).iter().all(|&k| k >= 1)
                && grid.slack_steps(node) >= 1)
            {
                continue;
            }
            let p = grid.point(node);
            let pc = p.coords();
            let f = model.running_cost(&p);
            let uv: Vec<S> = (0..d).map(|c| u.at(t, node, c)).collect();
            let du: Vec<Vec<S>> = (0..d).map(|i| u.intrinsic_gradient_at(t, node, i, 1)).collect();
            for i in 0..d {
                let dudt = (u.at(t + 1, node, i) - u.at(t - 1, node, i)) / (S::c(2.0) * dt);
                // capped Hamiltonian of the differences
                let mut ham = S::zero();
                for j in 0..d {
                    let w = uv[i] - uv[j];
                    let a = a_star(w, cap);
                    ham = ham + (-a * w + S::c(0.5) * a * a);
                }
                let mut repulsion = S::zero();
                for j in 0..d {
                    repulsion = repulsion + phi.value(pc[j]) * (uv[j] - uv[i]);
                }
                let mut transport = S::zero();
                for k in 0..d {
                    for j in 0..d {
                        let r = phi.value(pc[j]) + (uv[k] - uv[j]).max(S::zero());
                        transport = transport + pc[k] * r * (du[i][j] - du[i][k]);
                    }
                }
                let mut drift2 = S::zero();
                for j in 0..d {
                    drift2 = drift2 + pc[j] * (du[i][i] - du[i][j]);
                }
                // chart-form Kimura term
                let mut kim = S::zero();
                let slack = S::one() - pc[..m].iter().copied().sum::<S>();
                for a in 0..m {
                    let up = grid.neighbor(node, a, 1).unwrap();
                    let dn = grid.neighbor(node, a, -1).unwrap();
                    let dd =
                        (u.at(t, up, i) - S::c(2.0) * uv[i] + u.at(t, dn, i)) / (h * h);
                    kim = kim + pc[a] * slack * dd;
                }
                for a in 0..m {
                    for b in (a + 1)..m {
                        let mut delta = vec![0i32; m];
                        delta[a] = 1;
                        delta[b] = -1;
                        let up = grid.shifted(node, &delta);
                        delta[a] = -1;
                        delta[b] = 1;
                        let dn = grid.shifted(node, &delta);
                        if let (Some(up), Some(dn)) = (up, dn) {
                            let dd = (u.at(t, up, i) - S::c(2.0) * uv[i] + u.at(t, dn, i))
                                / (h * h);
                            kim = kim + pc[a] * pc[b] * dd;
                        }
                    }
                }
                kim = kim * S::c(0.5) * eps2;
                let theta = fields.correction.at(t, node, i);
                let res = dudt + ham + repulsion + f[i] + theta + transport
                    + eps2 * drift2
                    + kim;
                out.set(t, node, i, res);
            }
        }
    }
    out
}

/// Seeded Monte-Carlo collection of noise-driven trajectories, stored on a
/// uniform output mesh (the dynamics step at a finer internal step).
pub struct Ensemble<S: Real> {
    pub times: Vec<S>,
    pub n_paths: usize,
    pub d: usize,
    pub seed: u64,
    pub dt_internal: S,
    /// Population paths, `n_paths x times x d`.
    p: Vec<S>,
    /// Tagged-mass paths when simulated.
    q: Option<Vec<S>>,
    /// Per-path cumulative clipped mass.
    pub clip_mass: Vec<S>,
    /// Per-path flag: some coordinate entered the peak-repulsion band.
    pub boundary_hit: Vec<bool>,
    /// Per-path flag: tagged update hit a vanishing denominator.
    pub excluded: Vec<bool>,
}

impl<S: Real> Ensemble<S> {
    pub fn state(&self, path: usize, k: usize) -> &[S] {
        let o = (path * self.times.len() + k) * self.d;
        &self.p[o..o + self.d]
    }

    pub fn tagged(&self, path: usize, k: usize) -> Option<&[S]> {
        self.q.as_ref().map(|q| {
            let o = (path * self.times.len() + k) * self.d;
            &q[o..o + self.d]
        })
    }

    pub fn has_tagged(&self) -> bool {
        self.q.is_some()
    }

    pub fn boundary_hit_rate(&self) -> S {
        let hits = self.boundary_hit.iter().filter(|b| **b).count();
        S::from_usize(hits).unwrap() / S::from_usize(self.n_paths).unwrap()
    }

    pub fn total_clip_mass(&self) -> S {
        self.clip_mass.iter().copied().sum()
    }
}

/// Feedback used by the simulator: rates as a function of `(t, p)`.
pub trait Feedback<S: Real>: Sync {
    fn rates(&self, t: S, p: &SimplexPoint<S>) -> ControlMatrix<S>;
}

/// Clamp feedback interpolated from a gradient field.
pub struct FieldFeedback<'a, S: Real> {
    pub gradient: &'a GridField<S>,
    pub cap: S,
}

impl<'a, S: Real> Feedback<S> for FieldFeedback<'a, S> {
    fn rates(&self, t: S, p: &SimplexPoint<S>) -> ControlMatrix<S> {
        let (w, _) = self
            .gradient
            .interpolate(t, &p.to_chart())
            .expect("gradient interpolation");
        ControlMatrix::from_values(&w, self.cap)
    }
}

/// Time-independent rates.
pub struct ConstantFeedback<S: Real>(pub ControlMatrix<S>);

impl<S: Real> Feedback<S> for ConstantFeedback<S> {
    fn rates(&self, _t: S, _p: &SimplexPoint<S>) -> ControlMatrix<S> {
        self.0.clone()
    }
}

/// Euler-Maruyama simulation of the population dynamics (and optionally the
/// tagged mass driven by the same noise). Antisymmetric Brownian pairs are
/// built from `d(d-1)/2` independent normals per step; after each step
/// negative coordinates are clipped and the population renormalised (the
/// tagged mass is clipped but never renormalised).
#[allow(clippy::too_many_arguments)]
pub fn simulate<S: Real, F: Feedback<S>>(
    feedback: &F,
    cfg: &NoiseConfig<S>,
    t0: S,
    horizon: S,
    p0: &SimplexPoint<S>,
    q0: Option<&SimplexPoint<S>>,
    dt_request: S,
    store_steps: usize,
    n_paths: usize,
    seed: u64,
    workers: &Workers,
) -> Result<Ensemble<S>> {
    let d = p0.dim();
    let times = GridField::<S>::time_mesh(t0, horizon, store_steps);
    let dt_out = times[1] - times[0];
    let n_sub = ((dt_out / dt_request).ceil().to_f64_lossy() as usize).max(1);
    let dt = dt_out / S::from_usize(n_sub).unwrap();
    let sqrt_dt = dt.sqrt();
    let eps = cfg.eps;
    let phi = cfg.cutoff();
    let nt = times.len();
    let with_q = q0.is_some();

    struct PathOut<S> {
        p: Vec<S>,
        q: Vec<S>,
        clip: S,
        hit: bool,
        excluded: bool,
        error: Option<String>,
    }

    let run_path = |path: usize| -> PathOut<S> {
        let mut p = p0.coords().to_vec();
        let mut q = match q0 {
            Some(q0) => q0.coords().to_vec(),
            None => Vec::new(),
        };
        let mut out_p = Vec::with_capacity(nt * d);
        let mut out_q = Vec::with_capacity(if with_q { nt * d } else { 0 });
        out_p.extend_from_slice(&p);
        if with_q {
            out_q.extend_from_slice(&q);
        }
        let mut clip = S::zero();
        let mut hit = false;
        let mut excluded = false;
        let mut step_index = 0u64;
        for k in 0..nt - 1 {
            for sub in 0..n_sub {
                let t = times[k] + dt * S::from_usize(sub).unwrap();
                let point = SimplexPoint::new(p.clone()).expect("state stays on the simplex");
                let rates = feedback.rates(t, &point);
                let phi_at: Vec<S> = p.iter().map(|&v| phi.value(v)).collect();
                // drift transfers: rate from i to j is alpha_ij + phi(p_j)
                let mut dp = vec![S::zero(); d];
                let mut dq = vec![S::zero(); d];
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            let r = rates.rate(i, j) + phi_at[j];
                            let flow = p[i] * r * dt;
                            dp[i] = dp[i] - flow;
                            dp[j] = dp[j] + flow;
                            if with_q {
                                let qflow = q[i] * r * dt;
                                dq[i] = dq[i] - qflow;
                                dq[j] = dq[j] + qflow;
                            }
                        }
                    }
                }
                // shared antisymmetric noise
                let mut slot = 0u64;
                for i in 0..d {
                    for j in (i + 1)..d {
                        let xi = S::c(crate::rng::normal_at(seed, path as u64, step_index, slot))
                            * sqrt_dt;
                        slot += 1;
                        let amp = (p[i].max(S::zero()) * p[j].max(S::zero())).sqrt();
                        let kick = eps * amp * xi;
                        dp[i] = dp[i] + kick;
                        dp[j] = dp[j] - kick;
                        if with_q {
                            let ri = if p[i] > S::zero() { q[i] / p[i] } else { S::zero() };
                            let rj = if p[j] > S::zero() { q[j] / p[j] } else { S::zero() };
                            if (p[i] <= S::zero() && q[i] > S::zero())
                                || (p[j] <= S::zero() && q[j] > S::zero())
                            {
                                excluded = true;
                            }
                            dq[i] = dq[i] + ri * kick;
                            dq[j] = dq[j] - rj * kick;
                        }
                    }
                }
                for i in 0..d {
                    if dp[i].abs() > S::c(0.5) {
                        return PathOut {
                            p: out_p,
                            q: out_q,
                            clip,
                            hit,
                            excluded,
                            error: Some(format!(
                                "increment {} too large at path {path}",
                                dp[i]
                            )),
                        };
                    }
                    p[i] = p[i] + dp[i];
                    if p[i] < S::zero() {
                        clip = clip - p[i];
                        p[i] = S::zero();
                    }
                    if with_q {
                        q[i] = (q[i] + dq[i]).max(S::zero());
                    }
                }
                let mass: S = p.iter().copied().sum();
                for v in p.iter_mut() {
                    *v = *v / mass;
                }
                if p.iter().any(|&v| v < cfg.theta) {
                    hit = true;
                }
                step_index += 1;
            }
            out_p.extend_from_slice(&p);
            if with_q {
                out_q.extend_from_slice(&q);
            }
        }
        PathOut { p: out_p, q: out_q, clip, hit, excluded, error: None }
    };

    let results = workers.map_indexed(n_paths, run_path);
    let mut p_all = Vec::with_capacity(n_paths * nt * d);
    let mut q_all = if with_q { Vec::with_capacity(n_paths * nt * d) } else { Vec::new() };
    let mut clip_mass = Vec::with_capacity(n_paths);
    let mut boundary_hit = Vec::with_capacity(n_paths);
    let mut excluded = Vec::with_capacity(n_paths);
    for r in results {
        if let Some(e) = r.error {
            return Err(Error::Solver(e));
        }
        p_all.extend_from_slice(&r.p);
        if with_q {
            q_all.extend_from_slice(&r.q);
        }
        clip_mass.push(r.clip);
        boundary_hit.push(r.hit);
        excluded.push(r.excluded);
    }
    Ok(Ensemble {
        times,
        n_paths,
        d,
        seed,
        dt_internal: dt,
        p: p_all,
        q: if with_q { Some(q_all) } else { None },
        clip_mass,
        boundary_hit,
        excluded,
    })
}

/// Monte-Carlo cost estimates over an ensemble.
pub struct McCost<S: Real> {
    /// Planner cost estimate `(mean, standard error)`.
    pub planner: (S, S),
    /// Game cost of the tagged mass, when simulated.
    pub game: Option<(S, S)>,
    /// Absolute correction-cost contribution, when a correction field is
    /// supplied and the tagged mass was simulated.
    pub xi: Option<(S, S)>,
}

/// Path-wise trapezoid quadrature followed by the sample mean and standard
/// error. The planner cost integrates `sum_i p_i L_i + F(p)`; the game cost
/// integrates the tagged mass against the Lagrangian, running cost, and
/// (optionally) the correction field.
pub fn cost_mc<S: Real, F: Feedback<S>>(
    ensemble: &Ensemble<S>,
    model: &ModelSpec<S>,
    feedback: &F,
    correction: Option<&GridField<S>>,
) -> Result<McCost<S>> {
    let nt = ensemble.times.len();
    let d = ensemble.d;
    let mut planner_samples = Vec::with_capacity(ensemble.n_paths);
    let mut game_samples = Vec::with_capacity(ensemble.n_paths);
    let mut xi_samples = Vec::with_capacity(ensemble.n_paths);
    for path in 0..ensemble.n_paths {
        let mut planner_integrand = Vec::with_capacity(nt);
        let mut game_integrand = Vec::with_capacity(nt);
        let mut xi_integrand = Vec::with_capacity(nt);
        for k in 0..nt {
            let t = ensemble.times[k];
            let p = SimplexPoint::new(ensemble.state(path, k).to_vec())?;
            let rates = feedback.rates(t, &p);
            let mut run = model.running_potential(&p);
            for i in 0..d {
                run = run + p.get(i) * lagrangian(i, &rates);
            }
            planner_integrand.push(run);
            if let Some(q) = ensemble.tagged(path, k) {
                let f = model.running_cost(&p);
                let mut acc = S::zero();
                let mut xi_acc = S::zero();
                for i in 0..d {
                    acc = acc + q[i] * (lagrangian(i, &rates) + f[i]);
                }
                if let Some(th) = correction {
                    let (tv, _) = th.interpolate(t, &p.to_chart())?;
                    for i in 0..d {
                        acc = acc + q[i] * tv[i];
                        xi_acc = xi_acc + q[i] * tv[i];
                    }
                }
                game_integrand.push(acc);
                xi_integrand.push(xi_acc);
            }
        }
        let p_last = SimplexPoint::new(ensemble.state(path, nt - 1).to_vec())?;
        planner_samples.push(
            trapezoid_vals(&ensemble.times, &planner_integrand)
                + model.terminal_potential(&p_last),
        );
        if let Some(q) = ensemble.tagged(path, nt - 1) {
            let g = model.terminal_cost(&p_last);
            let mut game = trapezoid_vals(&ensemble.times, &game_integrand);
            for i in 0..d {
                game = game + q[i] * g[i];
            }
            game_samples.push(game);
            xi_samples.push(trapezoid_vals(&ensemble.times, &xi_integrand).abs());
        }
    }
    let planner = mean_se(&planner_samples);
    let game = if game_samples.is_empty() { None } else { Some(mean_se(&game_samples)) };
    let xi = if correction.is_some() && !xi_samples.is_empty() {
        Some(mean_se(&xi_samples))
    } else {
        None
    };
    Ok(McCost { planner, game, xi })
}

fn trapezoid_vals<S: Real>(times: &[S], vals: &[S]) -> S {
    let mut acc = S::zero();
    for k in 0..times.len() - 1 {
        acc = acc + (times[k + 1] - times[k]) * S::c(0.5) * (vals[k] + vals[k + 1]);
    }
    acc
}

fn mean_se<S: Real>(samples: &[S]) -> (S, S) {
    let n = S::from_usize(samples.len()).unwrap();
    let mean: S = samples.iter().copied().sum::<S>() / n;
    if samples.len() < 2 {
        return (mean, S::zero());
    }
    let var: S = samples
        .iter()
        .map(|&s| (s - mean) * (s - mean))
        .sum::<S>()
        / (n - S::one());
    (mean, (var / n).sqrt())
}

/// Empirical moment diagnostics (estimates only, never asserted bounds).
#[derive(Clone, Debug)]
pub struct MomentReport<S: Real> {
    /// `max_i E[exp{lambda int 1_{p_i <= delta} / p_i dt}]`, overflow-capped.
    pub exp_moment: S,
    /// `sup_t E[sum_i p_i^{-ell}]` over stored slices.
    pub inv_moment: S,
    /// `E[sup_t sum_i q_i^{ell}]` (0 when the tagged mass is absent).
    pub q_moment: S,
    /// Fraction of paths whose exponent hit the overflow cap.
    pub cap_hit_rate: S,
    /// Total clipped mass across the ensemble.
    pub clip_mass: S,
}

pub fn moment_diagnostics<S: Real>(
    ensemble: &Ensemble<S>,
    lambda: S,
    delta: S,
    ell: i32,
) -> MomentReport<S> {
    let nt = ensemble.times.len();
    let d = ensemble.d;
    let cap = S::c(700.0);
    let mut cap_hits = 0usize;
    let mut exp_moment = S::zero();
    for i in 0..d {
        let mut acc = S::zero();
        for path in 0..ensemble.n_paths {
            let mut integrand = Vec::with_capacity(nt);
            for k in 0..nt {
                let pi = ensemble.state(path, k)[i];
                integrand.push(if pi <= delta && pi > S::zero() {
                    S::one() / pi
                } else if pi <= S::zero() {
                    S::c(1e12)
                } else {
                    S::zero()
                });
            }
            let mut ex = lambda * trapezoid_vals(&ensemble.times, &integrand);
            if ex > cap {
                ex = cap;
                cap_hits += 1;
            }
            acc = acc + ex.exp();
        }
        exp_moment = exp_moment.max(acc / S::from_usize(ensemble.n_paths).unwrap());
    }
    let mut inv_moment = S::zero();
    for k in 0..nt {
        let mut acc = S::zero();
        for path in 0..ensemble.n_paths {
            for &pi in ensemble.state(path, k) {
                // zero coordinates (boundary-clipped) are excluded; positive
                // ones keep their full heavy-tail weight up to an overflow
                // floor, so an unstable moment grows with the sample size
                if pi > S::zero() {
                    acc = acc + pi.max(S::c(1e-18)).powi(-ell);
                }
            }
        }
        inv_moment = inv_moment.max(acc / S::from_usize(ensemble.n_paths).unwrap());
    }
    let mut q_moment = S::zero();
    if ensemble.has_tagged() {
        let mut acc = S::zero();
        for path in 0..ensemble.n_paths {
            let mut sup = S::zero();
            for k in 0..nt {
                let q = ensemble.tagged(path, k).unwrap();
                let mut s = S::zero();
                for &qi in q {
                    s = s + qi.powi(ell);
                }
                sup = sup.max(s);
            }
            acc = acc + sup;
        }
        q_moment = acc / S::from_usize(ensemble.n_paths).unwrap();
    }
    MomentReport {
        exp_moment,
        inv_moment,
        q_moment,
        cap_hit_rate: S::from_usize(cap_hits).unwrap()
            / S::from_usize(ensemble.n_paths * d).unwrap(),
        clip_mass: ensemble.total_clip_mass(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_model(d: usize, horizon: f64) -> ModelSpec<f64> {
        let run: crate::model::StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
        let term: crate::model::StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
        let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        let gp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        ModelSpec::new(d, horizon, run, term, Some(fp), Some(gp), Some(1.0), "zero").unwrap()
    }

    fn grid(d: usize, n: usize) -> Arc<SimplexGrid<f64>> {
        SimplexGrid::new(d, n).unwrap()
    }

    #[test]
    fn viscous_value_zero_and_constant() {
        let cfg = NoiseConfig::new(0.4f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        for d in [2usize, 3] {
            let g = grid(d, 20);
            let m = zero_model(d, 0.5);
            let dt = cfl_step(&m, &cfg, g.h()) * 0.9;
            let v = hjb_solve_viscous(&m, &cfg, g.clone(), dt, 20).unwrap();
            for t in 0..v.times.len() {
                for n in 0..g.len() {
                    assert_eq!(v.at(t, n, 0), 0.0, "d={d}");
                }
            }
            // constant terminal potential survives diffusion and repulsion
            let run: crate::model::StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
            let term: crate::model::StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
            let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
            let gp: crate::model::PotentialFn<f64> = Arc::new(|_| 1.3);
            let m =
                ModelSpec::new(d, 0.5, run, term, Some(fp), Some(gp), Some(1.0), "c").unwrap();
            let v = hjb_solve_viscous(&m, &cfg, g.clone(), dt, 20).unwrap();
            for t in 0..v.times.len() {
                for n in 0..g.len() {
                    assert_abs_diff_eq!(v.at(t, n, 0), 1.3, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn viscous_cfl_rejected() {
        let cfg = NoiseConfig::new(0.4f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        let g = grid(2, 20);
        let m = zero_model(2, 0.5);
        assert!(matches!(
            hjb_solve_viscous(&m, &cfg, g, 1.0, 10),
            Err(Error::Cfl(_))
        ));
    }

    #[test]
    fn viscous_monotone_random_pairs() {
        // ordered terminal potentials stay ordered through the scheme
        let cfg = NoiseConfig::new(0.3f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        let g = grid(2, 25);
        for s in 0..3u64 {
            let a = 0.5 + crate::rng::uniform_at(31, s, 0, 0);
            let bump = 0.3 + 0.4 * crate::rng::uniform_at(31, s, 1, 0);
            let mk = |extra: f64| -> ModelSpec<f64> {
                let run: crate::model::StateFn<f64> = Arc::new(|_| vec![0.0, 0.0]);
                let gpot = move |p: &SimplexPoint<f64>| -> f64 {
                    a * p.get(0) * p.get(1)
                        + extra * (-(p.get(0) - 0.4) * (p.get(0) - 0.4) / 0.05).exp()
                };
                let term: crate::model::StateFn<f64> = Arc::new(move |p| {
                    crate::simplex::intrinsic_gradient(
                        |q: &[f64]| gpot(&SimplexPoint::new(q.to_vec()).unwrap()),
                        p,
                        1e-6,
                    )
                    .unwrap_or(vec![0.0, 0.0])
                });
                let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
                let gp: crate::model::PotentialFn<f64> = Arc::new(move |p| gpot(p));
                ModelSpec::new(2, 0.4, run, term, Some(fp), Some(gp), Some(2.0), "pair").unwrap()
            };
            let lo_m = mk(0.0);
            let hi_m = mk(bump);
            let dt = cfl_step(&lo_m, &cfg, g.h()) * 0.9;
            let lo = hjb_solve_viscous(&lo_m, &cfg, g.clone(), dt, 20).unwrap();
            let hi = hjb_solve_viscous(&hi_m, &cfg, g.clone(), dt, 20).unwrap();
            for t in 0..lo.times.len() {
                for n in 0..g.len() {
                    assert!(lo.at(t, n, 0) <= hi.at(t, n, 0) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_extraction() {
        // affine chart field: constant intrinsic gradient, zero Schwarz residual
        let g = grid(3, 20);
        let mut f = GridField::zeros(g.clone(), vec![0.0, 1.0], 1);
        for t in 0..2 {
            for n in 0..g.len() {
                let x = g.chart(n);
                f.set(t, n, 0, 0.7 * x.coords()[0] - 0.2 * x.coords()[1] + 0.1);
            }
        }
        let (grad, schwarz) = extract_gradient(&f);
        assert!(schwarz <= 1e-12, "schwarz {schwarz}");
        let want = crate::simplex::chart_to_intrinsic(&[0.7, -0.2]);
        for n in 0..g.len() {
            for c in 0..3 {
                assert_abs_diff_eq!(grad.at(0, n, c), want[c], epsilon = 1e-10);
            }
            let sum: f64 = (0..3).map(|c| grad.at(0, n, c)).sum();
            assert!(sum.abs() <= 1e-12);
        }
        // quadratic sum-of-squares: gradient 2 p_i - 2/d up to O(h^2)
        let mut f = GridField::zeros(g.clone(), vec![0.0], 1);
        for n in 0..g.len() {
            let p = g.point(n);
            f.set(0, n, 0, p.coords().iter().map(|v| v * v).sum());
        }
        let (grad, _) = extract_gradient(&f);
        for n in 0..g.len() {
            if !g.is_interior(n) {
                continue;
            }
            let p = g.point(n);
            for c in 0..3 {
                let want = 2.0 * p.get(c) - 2.0 / 3.0;
                assert!((grad.at(0, n, c) - want).abs() <= 2.0 * g.h() * g.h() + 1e-12);
            }
        }
    }

    #[test]
    fn mean_value_trivial_cases() {
        let cfg = NoiseConfig::new(0.4f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        let g = grid(2, 25);
        let zero = zero_model(2, 0.5);
        let dt = cfl_step(&zero, &cfg, g.h()) * 0.9;
        let grad = GridField::zeros(g.clone(), GridField::time_mesh(0.0, 0.5, 25), 2);
        let y = solve_mean_value(&grad, &zero, &cfg, dt).unwrap();
        for t in 0..y.times.len() {
            for n in 0..g.len() {
                assert_eq!(y.at(t, n, 0), 0.0);
            }
        }
        // constant terminal cost vector: mean value stays at the constant
        let run: crate::model::StateFn<f64> = Arc::new(|_| vec![0.0, 0.0]);
        let term: crate::model::StateFn<f64> = Arc::new(|_| vec![0.9, 0.9]);
        let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        let gp: crate::model::PotentialFn<f64> = Arc::new(|p| 0.9 * (p.get(0) + p.get(1)));
        let m = ModelSpec::new(2, 0.5, run, term, Some(fp), Some(gp), Some(1.0), "c").unwrap();
        let cfg0 = NoiseConfig::without_repulsion(0.4);
        let y = solve_mean_value(&grad, &m, &cfg0, dt).unwrap();
        for t in 0..y.times.len() {
            for n in 0..g.len() {
                assert_abs_diff_eq!(y.at(t, n, 0), 0.9, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn mean_value_feynman_kac_oracle() {
        // without drift or sources the mean value is the expected terminal
        // average cost under the pure noise: check against Monte Carlo
        let model = ModelSpec::<f64>::builtin_d2(0.5);
        let cfg = NoiseConfig::without_repulsion(0.5);
        let g = grid(2, 100);
        let dt = cfl_step(&model, &cfg, g.h()) * 0.9;
        let grad = GridField::zeros(g.clone(), GridField::time_mesh(0.0, 0.5, 50), 2);
        let y = solve_mean_value(&grad, &model, &cfg, dt).unwrap();
        let p0 = SimplexPoint::new(vec![0.7, 0.3]).unwrap();
        let workers = Workers::new(4);
        let ens = simulate(
            &ConstantFeedback(ControlMatrix::zero(2)),
            &cfg,
            0.0,
            0.5,
            &p0,
            None,
            2e-4,
            50,
            10_000,
            99,
            &workers,
        )
        .unwrap();
        let samples: Vec<f64> = (0..ens.n_paths)
            .map(|path| {
                let p = ens.state(path, ens.times.len() - 1);
                let pt = SimplexPoint::new(p.to_vec()).unwrap();
                let gv = model.terminal_cost(&pt);
                p[0] * gv[0] + p[1] * gv[1]
            })
            .collect();
        let (mc, se) = mean_se(&samples);
        let grid_val = y.interpolate(0.0, &p0.to_chart()).unwrap().0[0];
        assert!(
            (grid_val - mc).abs() <= 3.0 * se + 0.02,
            "grid {grid_val} mc {mc} se {se}"
        );
    }

    #[test]
    fn correction_vanishes_without_noise_or_slope() {
        let g = grid(2, 20);
        let times = GridField::time_mesh(0.0, 0.3, 10);
        // V = 0 and constant mean value: every term vanishes
        let grad = GridField::zeros(g.clone(), times.clone(), 2);
        let mut mean = GridField::zeros(g.clone(), times.clone(), 1);
        for t in 0..times.len() {
            for n in 0..g.len() {
                mean.set(t, n, 0, 2.5);
            }
        }
        let cfg = NoiseConfig::new(0.3f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        let out = correction_cost(&grad, &mean, &cfg);
        for t in 0..times.len() {
            for n in 0..g.len() {
                for c in 0..2 {
                    assert_eq!(out.theta.at(t, n, c), 0.0);
                }
            }
        }
        // tiny noise and flat repulsion: correction is O(eps^2)
        let cfg = NoiseConfig::without_repulsion(1e-5);
        let mut grad = GridField::zeros(g.clone(), times.clone(), 2);
        let mut mean = GridField::zeros(g.clone(), times, 1);
        for t in 0..grad.times.len() {
            for n in 0..g.len() {
                let p = g.point(n);
                grad.set(t, n, 0, p.get(1) - p.get(0));
                grad.set(t, n, 1, p.get(0) - p.get(1));
                mean.set(t, n, 0, p.get(0) * p.get(1));
            }
        }
        let out = correction_cost(&grad, &mean, &cfg);
        for t in 0..grad.times.len() {
            for n in 0..g.len() {
                for c in 0..2 {
                    assert!(out.theta.at(t, n, c).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn state_value_reconstruction_identities() {
        let g = grid(3, 15);
        let times = GridField::time_mesh(0.0, 1.0, 8);
        let mut grad = GridField::zeros(g.clone(), times.clone(), 3);
        let mut mean = GridField::zeros(g.clone(), times.clone(), 1);
        for t in 0..times.len() {
            for n in 0..g.len() {
                let p = g.point(n);
                let w = crate::simplex::chart_to_intrinsic(&[
                    p.get(0) * 0.8 + 0.1,
                    -0.3 * p.get(1),
                ]);
                for c in 0..3 {
                    grad.set(t, n, c, w[c]);
                }
                mean.set(t, n, 0, 0.4 * p.get(0) - p.get(2));
            }
        }
        // constant-gradient-free case: V = 0, mean = c gives U = c
        let zero_grad = GridField::zeros(g.clone(), times.clone(), 3);
        let mut const_mean = GridField::zeros(g.clone(), times.clone(), 1);
        for t in 0..times.len() {
            for n in 0..g.len() {
                const_mean.set(t, n, 0, 1.7);
            }
        }
        let u = reconstruct_state_values(&zero_grad, &const_mean);
        for t in 0..times.len() {
            for n in 0..g.len() {
                for c in 0..3 {
                    assert_eq!(u.at(t, n, c), 1.7);
                }
            }
        }
        // differences of components reproduce differences of the gradient
        let u = reconstruct_state_values(&grad, &mean);
        for t in 0..times.len() {
            for n in 0..g.len() {
                for a in 0..3 {
                    for b in 0..3 {
                        let du = u.at(t, n, a) - u.at(t, n, b);
                        let dv = grad.at(t, n, a) - grad.at(t, n, b);
                        assert!((du - dv).abs() <= 1e-12);
                    }
                }
                // population average of U recovers the mean value
                let p = g.point(n);
                let avg: f64 = (0..3).map(|c| p.get(c) * u.at(t, n, c)).sum();
                assert_abs_diff_eq!(avg, mean.at(t, n, 0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn simulation_martingale_and_mass() {
        // driftless noise: the state is a componentwise martingale
        let cfg = NoiseConfig::without_repulsion(0.4);
        let p0 = SimplexPoint::new(vec![0.55, 0.25, 0.2]).unwrap();
        let workers = Workers::new(4);
        let ens = simulate(
            &ConstantFeedback(ControlMatrix::zero(3)),
            &cfg,
            0.0,
            1.0,
            &p0,
            None,
            5e-4,
            40,
            10_000,
            7,
            &workers,
        )
        .unwrap();
        let nt = ens.times.len();
        for k in [nt / 2, nt - 1] {
            for i in 0..3 {
                let samples: Vec<f64> =
                    (0..ens.n_paths).map(|path| ens.state(path, k)[i]).collect();
                let (mean, se) = mean_se(&samples);
                assert!(
                    (mean - p0.get(i)).abs() <= 3.0 * se,
                    "component {i} at slice {k}: mean {mean} vs {} (se {se})",
                    p0.get(i)
                );
            }
        }
        // unit mass at every stored step
        for path in 0..50 {
            for k in 0..nt {
                let mass: f64 = ens.state(path, k).iter().sum();
                assert!((mass - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn simulation_zero_noise_matches_ode() {
        let cfg = NoiseConfig::without_repulsion(1e-9);
        let mut rates = ControlMatrix::zero(2);
        rates.set_rate(0, 1, 1.0);
        rates.set_rate(1, 0, 1.0);
        let p0 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
        let ens = simulate(
            &ConstantFeedback(rates),
            &cfg,
            0.0,
            1.0,
            &p0,
            None,
            1e-4,
            20,
            1,
            1,
            &Workers::serial(),
        )
        .unwrap();
        for (k, t) in ens.times.iter().enumerate() {
            let exact = 0.5 + 0.4 * (-2.0 * *t as f64).exp();
            assert!((ens.state(0, k)[0] - exact).abs() <= 1e-3);
        }
    }

    #[test]
    fn tagged_mass_coupling_and_mean_mass() {
        let cfg = NoiseConfig::new(0.3f64, 0.02, 0.1, 0.5, 2.0).unwrap();
        let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let workers = Workers::new(4);
        // same start: tagged mass tracks the population pathwise
        let ens = simulate(
            &ConstantFeedback(ControlMatrix::zero(2)),
            &cfg,
            0.0,
            1.0,
            &p0,
            Some(&p0),
            2e-4,
            25,
            200,
            11,
            &workers,
        )
        .unwrap();
        for path in 0..ens.n_paths {
            for k in 0..ens.times.len() {
                let p = ens.state(path, k);
                let q = ens.tagged(path, k).unwrap();
                for i in 0..2 {
                    assert!((p[i] - q[i]).abs() <= 1e-12, "path {path} slice {k}");
                }
            }
        }
        // Dirac start: tagged mass has unit mean mass at the end
        let q0 = SimplexPoint::dirac(2, 0);
        let ens = simulate(
            &ConstantFeedback(ControlMatrix::zero(2)),
            &cfg,
            0.0,
            1.0,
            &p0,
            Some(&q0),
            2e-4,
            25,
            10_000,
            13,
            &workers,
        )
        .unwrap();
        let samples: Vec<f64> = (0..ens.n_paths)
            .map(|path| ens.tagged(path, ens.times.len() - 1).unwrap().iter().sum())
            .collect();
        let (mean, se) = mean_se(&samples);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean mass {mean} se {se}");
    }

    #[test]
    fn mc_cost_degenerate_cases() {
        // all-zero costs: exactly (0, 0)
        let m = zero_model(2, 1.0);
        let cfg = NoiseConfig::without_repulsion(0.2);
        let p0 = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
        let fb = ConstantFeedback(ControlMatrix::zero(2));
        let ens =
            simulate(&fb, &cfg, 0.0, 1.0, &p0, Some(&p0), 1e-3, 20, 100, 3, &Workers::serial())
                .unwrap();
        let out = cost_mc(&ens, &m, &fb, None).unwrap();
        assert_eq!(out.planner, (0.0, 0.0));
        assert_eq!(out.game, Some((0.0, 0.0)));
        // nearly deterministic ensemble reproduces the planner quadrature
        let model = ModelSpec::<f64>::builtin_d2(1.0);
        let cfg = NoiseConfig::without_repulsion(1e-9);
        let mut rates = ControlMatrix::zero(2);
        rates.set_rate(0, 1, 0.5);
        let fb = ConstantFeedback(rates.clone());
        let ens =
            simulate(&fb, &cfg, 0.0, 1.0, &p0, None, 1e-4, 200, 1, 5, &Workers::serial()).unwrap();
        let out = cost_mc(&ens, &model, &fb, None).unwrap();
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 200);
        let want =
            crate::inviscid::mfcp_cost(&model, &vec![rates; times.len()], &times, &p0).unwrap();
        assert!((out.planner.0 - want).abs() <= 1e-3, "{} vs {want}", out.planner.0);
    }

    #[test]
    fn moment_diagnostics_interior_paths() {
        // strong repulsion keeps paths away from the band: exponential
        // moment is exactly one and nothing hits the cap
        let cfg = NoiseConfig::new(0.2f64, 0.02, 0.1, 1.0, 2.0).unwrap();
        let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let ens = simulate(
            &ConstantFeedback(ControlMatrix::zero(2)),
            &cfg,
            0.0,
            0.5,
            &p0,
            None,
            2e-4,
            25,
            500,
            21,
            &Workers::new(2),
        )
        .unwrap();
        let report = moment_diagnostics(&ens, 1.0, 0.05, 1);
        assert_eq!(report.exp_moment, 1.0);
        assert_eq!(report.cap_hit_rate, 0.0);
        assert!(report.inv_moment.is_finite() && report.inv_moment > 0.0);
    }
}

#[cfg(test)]
mod moment_tests {
    use super::*;
    use crate::model::NoiseConfig;

    #[test]
    fn unguarded_inverse_moments_grow_with_sample_size() {
        // repulsion off and visible noise: boundary-clipped paths make the
        // fourth inverse moment unstable, which the diagnostic exposes by
        // growing as paths are added
        let cfg = NoiseConfig::without_repulsion(0.5);
        let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let run = |n: usize| {
            let ens = simulate(
                &ConstantFeedback(ControlMatrix::zero(2)),
                &cfg,
                0.0,
                1.0,
                &p0,
                None,
                5e-4,
                40,
                n,
                1234,
                &Workers::new(4),
            )
            .unwrap();
            moment_diagnostics(&ens, 1.0, 0.05, 4).inv_moment
        };
        let small = run(300);
        let large = run(3000);
        assert!(
            large > 2.0 * small,
            "instability not detected: {small} vs {large}"
        );
    }
}
