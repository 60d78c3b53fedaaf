//! Noise-free layer: forward equation, game and planner costs, best
//! response, equilibrium search, the forward-backward (Pontryagin) system in
//! chart coordinates, a semi-Lagrangian solver for the planner value
//! function, and the planner minimiser with its differentiability probe.

use crate::error::{Error, Result};
use crate::model::{
    a_star, chart_feedback_rate, chart_hamiltonian, hamiltonian, lagrangian, ControlMatrix,
    ModelSpec,
};
use crate::parallel::Workers;
use crate::scalar::Real;
use crate::simplex::{
    chart_to_intrinsic, ChartPoint, GridField, SimplexGrid, SimplexPoint,
};
use std::sync::Arc;

/// Mass drift beyond which a forward solve aborts (step size too coarse).
const MASS_TOL: f64 = 1e-8;

/// Discrete state/control path on a uniform time mesh.
#[derive(Clone, Debug)]
pub struct Trajectory<S: Real> {
    pub times: Vec<S>,
    pub points: Vec<SimplexPoint<S>>,
    pub controls: Vec<ControlMatrix<S>>,
    /// Optional value process along the path.
    pub values: Option<Vec<Vec<S>>>,
    /// Cumulative mass clipped away by nonnegativity repair.
    pub clip_mass: S,
}

impl<S: Real> Trajectory<S> {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> S {
        self.times[1] - self.times[0]
    }

    /// Linear-in-time state lookup (renormalised).
    pub fn point_at(&self, t: S) -> SimplexPoint<S> {
        let (k, w) = locate(&self.times, t);
        let a = self.points[k].coords();
        let b = self.points[(k + 1).min(self.points.len() - 1)].coords();
        let p: Vec<S> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (S::one() - w) * x + w * y)
            .collect();
        SimplexPoint::new(p).expect("interpolated point stays in the simplex")
    }

    pub fn control_at(&self, t: S, cap: S) -> ControlMatrix<S> {
        let (k, w) = locate(&self.times, t);
        let d = self.points[0].dim();
        let a = &self.controls[k.min(self.controls.len() - 1)];
        let b = &self.controls[(k + 1).min(self.controls.len() - 1)];
        let mut out = ControlMatrix::zero(d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let v = (S::one() - w) * a.rate(i, j) + w * b.rate(i, j);
                    out.set_rate(i, j, a_star(v, cap));
                }
            }
        }
        out
    }

    /// Largest coordinate gap to another path on the same mesh.
    pub fn sup_distance(&self, other: &Trajectory<S>) -> S {
        let mut worst = S::zero();
        for (a, b) in self.points.iter().zip(&other.points) {
            for (x, y) in a.coords().iter().zip(b.coords()) {
                worst = worst.max((*x - *y).abs());
            }
        }
        worst
    }

    /// Two-state mean coordinate `2 p_1 - 1` along the path.
    pub fn mean_path(&self) -> Vec<S> {
        self.points
            .iter()
            .map(|p| S::c(2.0) * p.get(0) - S::one())
            .collect()
    }
}

fn locate<S: Real>(times: &[S], t: S) -> (usize, S) {
    let n = times.len();
    if n == 1 {
        return (0, S::zero());
    }
    let dt = times[1] - times[0];
    let s = ((t - times[0]) / dt)
        .max(S::zero())
        .min(S::from_usize(n - 1).unwrap());
    let k = (s.floor().to_f64_lossy() as usize).min(n - 2);
    (k, s - S::from_usize(k).unwrap())
}

/// Fourth-order step of the forward equation under piecewise-linear controls.
fn rk4_forward<S: Real, F: Fn(S) -> ControlMatrix<S>>(
    q: &[S],
    t: S,
    dt: S,
    control: &F,
) -> Vec<S> {
    let deriv = |state: &[S], at: S| control(at).apply_drift(state);
    let half = dt * S::c(0.5);
    let k1 = deriv(q, t);
    let s2: Vec<S> = q.iter().zip(&k1).map(|(&a, &b)| a + half * b).collect();
    let k2 = deriv(&s2, t + half);
    let s3: Vec<S> = q.iter().zip(&k2).map(|(&a, &b)| a + half * b).collect();
    let k3 = deriv(&s3, t + half);
    let s4: Vec<S> = q.iter().zip(&k3).map(|(&a, &b)| a + dt * b).collect();
    let k4 = deriv(&s4, t + dt);
    let sixth = dt / S::c(6.0);
    q.iter()
        .enumerate()
        .map(|(i, &a)| a + sixth * (k1[i] + S::c(2.0) * (k2[i] + k3[i]) + k4[i]))
        .collect()
}

/// Integrates the forward equation `dq_i = sum_j q_j rate(j, i)` from `q0`
/// under per-mesh-point controls (linearly interpolated inside steps).
/// Mass is conserved by the generator; small negative undershoots are
/// clipped and the state renormalised, with the clipped mass accumulated.
pub fn solve_fp<S: Real>(
    controls: &[ControlMatrix<S>],
    times: &[S],
    q0: &SimplexPoint<S>,
) -> Result<Trajectory<S>> {
    if controls.len() != times.len() {
        return Err(Error::MeshMismatch(format!(
            "{} controls for {} mesh points",
            controls.len(),
            times.len()
        )));
    }
    let d = q0.dim();
    let cap = controls
        .iter()
        .fold(S::zero(), |a, c| a.max(c.sup_norm()));
    let lookup = |t: S| -> ControlMatrix<S> {
        let (k, w) = locate(times, t);
        let a = &controls[k];
        let b = &controls[(k + 1).min(controls.len() - 1)];
        let mut out = ControlMatrix::zero(d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let v = (S::one() - w) * a.rate(i, j) + w * b.rate(i, j);
                    out.set_rate(i, j, a_star(v, cap + S::one()));
                }
            }
        }
        out
    };
    let mut points = Vec::with_capacity(times.len());
    let mut clip_mass = S::zero();
    let mut q = q0.coords().to_vec();
    points.push(q0.clone());
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let mut next = rk4_forward(&q, times[k], dt, &lookup);
        let mut clipped = S::zero();
        for v in next.iter_mut() {
            if *v < S::zero() {
                clipped = clipped - *v;
                *v = S::zero();
            }
        }
        if clipped > S::c(MASS_TOL) {
            return Err(Error::Solver(format!(
                "negative mass {clipped} at step {k}: reduce the step size"
            )));
        }
        clip_mass = clip_mass + clipped;
        let mass: S = next.iter().copied().sum();
        for v in next.iter_mut() {
            *v = *v / mass;
        }
        q = next.clone();
        points.push(SimplexPoint::new(next)?);
    }
    Ok(Trajectory {
        times: times.to_vec(),
        points,
        controls: controls.to_vec(),
        values: None,
        clip_mass,
    })
}

fn trapezoid<S: Real>(times: &[S], integrand: &[S]) -> S {
    let mut acc = S::zero();
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        acc = acc + dt * S::c(0.5) * (integrand[k] + integrand[k + 1]);
    }
    acc
}

/// Game cost of a control against a fixed environment path: the controlled
/// mass `q` pays the running Lagrangian plus `f(p)`, and `g(p_T)` at the end.
pub fn mfg_cost<S: Real>(
    model: &ModelSpec<S>,
    controls: &[ControlMatrix<S>],
    env: &Trajectory<S>,
    q0: &SimplexPoint<S>,
) -> Result<S> {
    if controls.len() != env.times.len() {
        return Err(Error::MeshMismatch("control and environment meshes differ".into()));
    }
    let q = solve_fp(controls, &env.times, q0)?;
    let mut integrand = Vec::with_capacity(env.times.len());
    for k in 0..env.times.len() {
        let run = model.running_cost(&env.points[k]);
        let mut acc = S::zero();
        for i in 0..model.d {
            acc = acc + q.points[k].get(i) * (lagrangian(i, &controls[k]) + run[i]);
        }
        integrand.push(acc);
    }
    let mut total = trapezoid(&env.times, &integrand);
    let term = model.terminal_cost(env.points.last().unwrap());
    for i in 0..model.d {
        total = total + q.points.last().unwrap().get(i) * term[i];
    }
    Ok(total)
}

/// Planner cost: the controlled flow pays its own Lagrangian plus the
/// potentials `F` along the way and `G` at the end.
pub fn mfcp_cost<S: Real>(
    model: &ModelSpec<S>,
    controls: &[ControlMatrix<S>],
    times: &[S],
    p0: &SimplexPoint<S>,
) -> Result<S> {
    if !model.has_potentials() {
        return Err(Error::InvalidModel("planner cost needs potentials".into()));
    }
    let q = solve_fp(controls, times, p0)?;
    let mut integrand = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let mut acc = model.running_potential(&q.points[k]);
        for i in 0..model.d {
            acc = acc + q.points[k].get(i) * lagrangian(i, &controls[k]);
        }
        integrand.push(acc);
    }
    Ok(trapezoid(times, &integrand) + model.terminal_potential(q.points.last().unwrap()))
}

/// Best response against a fixed environment path.
#[derive(Clone, Debug)]
pub struct BestResponse<S: Real> {
    /// Per-state value process along the mesh.
    pub values: Vec<Vec<S>>,
    pub controls: Vec<ControlMatrix<S>>,
    pub cost: S,
}

/// Backward value sweep against the environment `env`, feedback
/// `rate(i -> j) = (u_i - u_j)_+`, and the induced cost from `q0`.
pub fn best_response<S: Real>(
    model: &ModelSpec<S>,
    env: &Trajectory<S>,
    q0: &SimplexPoint<S>,
) -> Result<BestResponse<S>> {
    let d = model.d;
    let times = &env.times;
    let n = times.len();
    let bound = model.cap() * S::c(0.5);
    let rhs = |u: &[S], t: S| -> Vec<S> {
        let p = env.point_at(t);
        let f = model.running_cost(&p);
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let diffs: Vec<S> = (0..d).map(|j| u[i] - u[j]).collect();
            out.push(-(hamiltonian(&diffs) + f[i]));
        }
        out
    };
    let mut values = vec![Vec::new(); n];
    let mut u = model.terminal_cost(env.points.last().unwrap());
    values[n - 1] = u.clone();
    for k in (0..n - 1).rev() {
        let dt = times[k] - times[k + 1]; // negative step
        let half = dt * S::c(0.5);
        let k1 = rhs(&u, times[k + 1]);
        let s2: Vec<S> = u.iter().zip(&k1).map(|(&a, &b)| a + half * b).collect();
        let k2 = rhs(&s2, times[k + 1] + half);
        let s3: Vec<S> = u.iter().zip(&k2).map(|(&a, &b)| a + half * b).collect();
        let k3 = rhs(&s3, times[k + 1] + half);
        let s4: Vec<S> = u.iter().zip(&k3).map(|(&a, &b)| a + dt * b).collect();
        let k4 = rhs(&s4, times[k + 1] + dt);
        let sixth = dt / S::c(6.0);
        for i in 0..d {
            u[i] = u[i] + sixth * (k1[i] + S::c(2.0) * (k2[i] + k3[i]) + k4[i]);
            if u[i].abs() > S::c(2.0) * bound + S::one() {
                return Err(Error::Solver(format!(
                    "value process blew up ({}) at step {k}",
                    u[i]
                )));
            }
        }
        values[k] = u.clone();
    }
    let controls: Vec<ControlMatrix<S>> = values
        .iter()
        .map(|u| {
            let mut m = ControlMatrix::zero(d);
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        m.set_rate(i, j, (u[i] - u[j]).max(S::zero()));
                    }
                }
            }
            m
        })
        .collect();
    let cost = mfg_cost(model, &controls, env, q0)?;
    Ok(BestResponse { values, controls, cost })
}

/// Outcome of the multistart equilibrium search.
#[derive(Clone, Debug)]
pub struct MfgSolve<S: Real> {
    /// Distinct equilibria (fixed points verified by a best-response replay).
    pub equilibria: Vec<Trajectory<S>>,
    /// Replay residual of each returned equilibrium.
    pub residuals: Vec<S>,
    pub starts_attempted: usize,
    pub starts_converged: usize,
}

/// Damped fixed-point iteration with multistart: the map sends an
/// environment guess to the forward flow of its best response. Converged
/// fixed points are deduplicated at sup-distance `1e-4` and each survivor is
/// verified to reproduce itself within `1e-6`.
pub fn mfg_fixed_point<S: Real>(
    model: &ModelSpec<S>,
    p0: &SimplexPoint<S>,
    steps: usize,
    multistarts: usize,
    seed: u64,
    workers: &Workers,
) -> Result<MfgSolve<S>> {
    let times = GridField::<S>::time_mesh(S::zero(), model.horizon, steps);
    let runs = workers.map_indexed(multistarts.max(1), |s| {
        let guess = initial_guess(model, p0, &times, s, seed);
        picard(model, p0, &times, guess)
    });
    let mut equilibria: Vec<Trajectory<S>> = Vec::new();
    let mut residuals: Vec<S> = Vec::new();
    let mut converged = 0;
    for run in runs.into_iter().flatten() {
        converged += 1;
        // verify the equilibrium property by replaying the best response
        let br = match best_response(model, &run, p0) {
            Ok(br) => br,
            Err(_) => continue,
        };
        let replay = match solve_fp(&br.controls, &times, p0) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let residual = replay.sup_distance(&run);
        if residual > S::c(1e-6) {
            continue;
        }
        if equilibria.iter().all(|e| e.sup_distance(&run) >= S::c(1e-4)) {
            let mut with_values = run;
            with_values.values = Some(br.values);
            with_values.controls = br.controls;
            equilibria.push(with_values);
            residuals.push(residual);
        }
    }
    Ok(MfgSolve {
        equilibria,
        residuals,
        starts_attempted: multistarts.max(1),
        starts_converged: converged,
    })
}

fn initial_guess<S: Real>(
    model: &ModelSpec<S>,
    p0: &SimplexPoint<S>,
    times: &[S],
    start: usize,
    seed: u64,
) -> Trajectory<S> {
    let d = model.d;
    let points: Vec<SimplexPoint<S>> = if start == 0 {
        times.iter().map(|_| p0.clone()).collect()
    } else {
        // drift towards a random anchor drawn from a seeded stream
        let mut anchor = vec![S::zero(); d];
        let mut sum = S::zero();
        for (j, a) in anchor.iter_mut().enumerate() {
            let u = crate::rng::uniform_at(seed, start as u64, j as u64, 0);
            *a = S::c(-(u.ln()));
            sum = sum + *a;
        }
        for a in anchor.iter_mut() {
            *a = *a / sum;
        }
        let strength = S::c(0.3 + 0.7 * crate::rng::uniform_at(seed, start as u64, 101, 0));
        let horizon = *times.last().unwrap() - times[0];
        times
            .iter()
            .map(|&t| {
                let w = strength * ((t - times[0]) / horizon * S::c(2.0)).min(S::one());
                let p: Vec<S> = p0
                    .coords()
                    .iter()
                    .zip(&anchor)
                    .map(|(&a, &b)| (S::one() - w) * a + w * b)
                    .collect();
                SimplexPoint::new(p).unwrap()
            })
            .collect()
    };
    Trajectory {
        times: times.to_vec(),
        points,
        controls: vec![ControlMatrix::zero(d); times.len()],
        values: None,
        clip_mass: S::zero(),
    }
}

fn picard<S: Real>(
    model: &ModelSpec<S>,
    p0: &SimplexPoint<S>,
    times: &[S],
    mut guess: Trajectory<S>,
) -> Option<Trajectory<S>> {
    let mut damping = S::c(0.5);
    let mut prev_delta = S::infinity();
    for _ in 0..500 {
        let br = best_response(model, &guess, p0).ok()?;
        let flow = solve_fp(&br.controls, times, p0).ok()?;
        let delta = flow.sup_distance(&guess);
        if delta <= S::c(1e-8) {
            return Some(flow);
        }
        if delta > prev_delta {
            damping = (damping * S::c(0.7)).max(S::c(0.05));
        }
        prev_delta = delta;
        for (gp, fp) in guess.points.iter_mut().zip(&flow.points) {
            let mixed: Vec<S> = gp
                .coords()
                .iter()
                .zip(fp.coords())
                .map(|(&a, &b)| (S::one() - damping) * a + damping * b)
                .collect();
            *gp = SimplexPoint::new(mixed).ok()?;
        }
    }
    None
}

/// Forward-backward path in chart coordinates.
#[derive(Clone, Debug)]
pub struct ChartPath<S: Real> {
    pub times: Vec<S>,
    pub x: Vec<Vec<S>>,
    pub z: Vec<Vec<S>>,
    /// Self-consistency residual of the converged sweeps.
    pub residual: S,
}

impl<S: Real> ChartPath<S> {
    /// Lifts the state path back to the simplex.
    pub fn trajectory(&self, model: &ModelSpec<S>) -> Trajectory<S> {
        let d = model.d;
        let points: Vec<SimplexPoint<S>> = self
            .x
            .iter()
            .map(|x| ChartPoint::new_clamped(x).from_chart())
            .collect();
        let controls: Vec<ControlMatrix<S>> = self
            .z
            .iter()
            .map(|z| {
                let mut m = ControlMatrix::zero(d);
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            m.set_rate(i, j, chart_feedback_rate(i, j, z, model.cap()));
                        }
                    }
                }
                m
            })
            .collect();
        Trajectory {
            times: self.times.clone(),
            points,
            controls,
            values: None,
            clip_mass: S::zero(),
        }
    }
}

/// Iterated forward-backward sweeps for the chart Pontryagin system: the
/// costate solves the backward equation driven by the capped Hamiltonian
/// differences, the state flows forward under the clamp feedback.
pub fn pontryagin_solve<S: Real>(
    model: &ModelSpec<S>,
    t0: S,
    p0: &SimplexPoint<S>,
    steps: usize,
    z_guess: Option<Vec<S>>,
) -> Result<ChartPath<S>> {
    if !p0.is_interior(S::zero()) {
        return Err(Error::InvalidPoint("interior start required".into()));
    }
    let d = model.d;
    let m = d - 1;
    let cap = model.cap();
    let times = GridField::<S>::time_mesh(t0, model.horizon, steps);
    let n = times.len();

    let centred = |vals: Vec<S>| -> Vec<S> {
        (0..m).map(|i| vals[i] - vals[m]).collect()
    };
    let forward = |z_path: &Vec<Vec<S>>| -> Result<Vec<Vec<S>>> {
        let controls: Vec<ControlMatrix<S>> = z_path
            .iter()
            .map(|z| {
                let mut c = ControlMatrix::zero(d);
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            c.set_rate(i, j, chart_feedback_rate(i, j, z, cap));
                        }
                    }
                }
                c
            })
            .collect();
        let flow = solve_fp(&controls, &times, p0)?;
        Ok(flow
            .points
            .iter()
            .map(|p| p.coords()[..m].to_vec())
            .collect())
    };
    let backward = |x_path: &Vec<Vec<S>>| -> Vec<Vec<S>> {
        let point = |x: &[S]| ChartPoint::new_clamped(x).from_chart();
        let terminal = model.terminal_cost(&point(&x_path[n - 1]));
        let mut z = centred(terminal);
        let mut out = vec![Vec::new(); n];
        out[n - 1] = z.clone();
        let x_at = |t: S| -> Vec<S> {
            let (k, w) = locate(&times, t);
            x_path[k]
                .iter()
                .zip(&x_path[(k + 1).min(n - 1)])
                .map(|(&a, &b)| (S::one() - w) * a + w * b)
                .collect()
        };
        let rhs = |z: &[S], t: S| -> Vec<S> {
            let x = x_at(t);
            let f = model.running_cost(&point(&x));
            let h_last = chart_hamiltonian(d - 1, z, cap);
            (0..m)
                .map(|i| -(chart_hamiltonian(i, z, cap) - h_last + f[i] - f[m]))
                .collect()
        };
        for k in (0..n - 1).rev() {
            let dt = times[k] - times[k + 1];
            let half = dt * S::c(0.5);
            let k1 = rhs(&z, times[k + 1]);
            let s2: Vec<S> = z.iter().zip(&k1).map(|(&a, &b)| a + half * b).collect();
            let k2 = rhs(&s2, times[k + 1] + half);
            let s3: Vec<S> = z.iter().zip(&k2).map(|(&a, &b)| a + half * b).collect();
            let k3 = rhs(&s3, times[k + 1] + half);
            let s4: Vec<S> = z.iter().zip(&k3).map(|(&a, &b)| a + dt * b).collect();
            let k4 = rhs(&s4, times[k + 1] + dt);
            let sixth = dt / S::c(6.0);
            for i in 0..m {
                z[i] = z[i] + sixth * (k1[i] + S::c(2.0) * (k2[i] + k3[i]) + k4[i]);
            }
            out[k] = z.clone();
        }
        out
    };

    let mut z_path: Vec<Vec<S>> = match z_guess {
        Some(z) => vec![z; n],
        None => vec![vec![S::zero(); m]; n],
    };
    let mut damping = S::c(0.5);
    let mut prev_delta = S::infinity();
    for _ in 0..500 {
        let x_path = forward(&z_path)?;
        let z_new = backward(&x_path);
        let mut delta = S::zero();
        for (za, zb) in z_path.iter().zip(&z_new) {
            for (a, b) in za.iter().zip(zb) {
                delta = delta.max((*a - *b).abs());
            }
        }
        if delta > prev_delta {
            damping = (damping * S::c(0.7)).max(S::c(0.05));
        }
        prev_delta = delta;
        for (za, zb) in z_path.iter_mut().zip(&z_new) {
            for (a, b) in za.iter_mut().zip(zb) {
                *a = (S::one() - damping) * *a + damping * *b;
            }
        }
        if delta <= S::c(1e-9) {
            let x_path = forward(&z_path)?;
            let z_chk = backward(&x_path);
            let mut residual = S::zero();
            for (za, zb) in z_path.iter().zip(&z_chk) {
                for (a, b) in za.iter().zip(zb) {
                    residual = residual.max((*a - *b).abs());
                }
            }
            return Ok(ChartPath { times, x: x_path, z: z_path, residual });
        }
    }
    Err(Error::Solver("forward-backward sweeps did not converge".into()))
}

/// Planner value function on a grid, solved by a backward semi-Lagrangian
/// scheme, plus the cumulative clamp applied to scheme feet.
#[derive(Clone, Debug)]
pub struct ValueField<S: Real> {
    pub value: GridField<S>,
    pub clamp_mass: S,
}

impl<S: Real> ValueField<S> {
    /// Intrinsic-gradient field of the value.
    pub fn gradient_field(&self, stride: i32) -> GridField<S> {
        self.value.gradient_field(0, stride)
    }
}

/// Backward semi-Lagrangian solve of the planner equation on the lattice.
///
/// At each node the update minimises, over a small family of clamp-feedback
/// candidates (built from central and one-sided gradients of the next slice,
/// plus the zero control), the one-step cost plus the interpolated
/// continuation at the transported foot. No boundary condition is imposed:
/// the forward drift keeps feet inside the simplex up to floating-point
/// drift, which is clamped and accumulated.
pub fn hjb_solve<S: Real>(
    model: &ModelSpec<S>,
    grid: Arc<SimplexGrid<S>>,
    dt_request: S,
) -> Result<ValueField<S>> {
    if !model.has_potentials() {
        return Err(Error::InvalidModel("planner value needs potentials".into()));
    }
    let d = model.d;
    let m = d - 1;
    let cap = model.cap();
    let h = grid.h();
    let cfl = h / (S::from_usize(d).unwrap() * cap * S::c(2.0));
    if dt_request > cfl {
        return Err(Error::Cfl(format!(
            "dt {dt_request} exceeds h/(2 d M) = {cfl}"
        )));
    }
    let steps = (model.horizon / dt_request).ceil().to_f64_lossy() as usize;
    let times = GridField::<S>::time_mesh(S::zero(), model.horizon, steps.max(1));
    let dt = times[1] - times[0];
    let nt = times.len();
    let mut field = GridField::zeros(grid.clone(), times, 1);
    let mut clamp_mass = S::zero();
    for node in 0..grid.len() {
        let g = model.terminal_potential(&grid.point(node));
        field.set(nt - 1, node, 0, g);
    }
    for k in (0..nt - 1).rev() {
        let mut slice = vec![S::zero(); grid.len()];
        for node in 0..grid.len() {
            let x = grid.chart(node);
            let p = grid.point(node);
            let run_pot = model.running_potential(&p);
            // candidate gradients of the next slice
            let mut cands: Vec<Vec<S>> = Vec::new();
            cands.push(field.chart_gradient(k + 1, node, 0, 1));
            for signs in 0..(1 << m) {
                let mut zc = Vec::with_capacity(m);
                let mut ok = true;
                for axis in 0..m {
                    let dir: i32 = if (signs >> axis) & 1 == 0 { 1 } else { -1 };
                    match grid.neighbor(node, axis, dir) {
                        Some(nb) => {
                            let diff = (field.at(k + 1, nb, 0) - field.at(k + 1, node, 0))
                                / (h * S::from_i32(dir).unwrap());
                            zc.push(diff);
                        }
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    cands.push(zc);
                }
            }
            let mut best = dt * run_pot + field.at(k + 1, node, 0); // zero control
            for zc in &cands {
                let mut rates = ControlMatrix::zero(d);
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            rates.set_rate(i, j, chart_feedback_rate(i, j, zc, cap));
                        }
                    }
                }
                let drift = rates.apply_drift(p.coords());
                let foot: Vec<S> = (0..m)
                    .map(|a| x.coords()[a] + dt * drift[a])
                    .collect();
                let (cont, moved) = field.interpolate_at_slice(k + 1, &foot)?;
                clamp_mass = clamp_mass + moved;
                let mut running = run_pot;
                for i in 0..d {
                    running = running + p.get(i) * lagrangian(i, &rates);
                }
                let v = dt * running + cont[0];
                if v < best {
                    best = v;
                }
            }
            slice[node] = best;
        }
        for (node, v) in slice.into_iter().enumerate() {
            field.set(k, node, 0, v);
        }
    }
    Ok(ValueField { value: field, clamp_mass })
}

/// Differentiability probe of a grid value at a point.
#[derive(Clone, Debug)]
pub struct Differentiability<S: Real> {
    pub differentiable: bool,
    /// Central-difference chart gradient.
    pub gradient_chart: Vec<S>,
    /// Intrinsic lift of the chart gradient.
    pub gradient: Vec<S>,
}

/// Compares one-sided difference quotients of the interpolated value at
/// three shrinking scales; the verdict is `differentiable` when left and
/// right slopes agree within `5 h` in every chart direction at the finest
/// scale.
pub fn differentiability_test<S: Real>(
    value: &GridField<S>,
    t0: S,
    p0: &SimplexPoint<S>,
) -> Result<Differentiability<S>> {
    let grid = &value.grid;
    let m = grid.chart_dim();
    let h = grid.h();
    let x0 = p0.to_chart();
    let probe = |x: &[S]| -> Result<S> {
        Ok(value.interpolate(t0, &ChartPoint::new_clamped(x))?.0[0])
    };
    let base = probe(x0.coords())?;
    let mut differentiable = true;
    let mut gradient_chart = vec![S::zero(); m];
    for axis in 0..m {
        let mut fine_gap = S::zero();
        let mut fine_grad = S::zero();
        for scale in [S::c(4.0) * h, S::c(2.0) * h, h] {
            let mut xp = x0.coords().to_vec();
            let mut xm = x0.coords().to_vec();
            xp[axis] = xp[axis] + scale;
            xm[axis] = xm[axis] - scale;
            let right = (probe(&xp)? - base) / scale;
            let left = (base - probe(&xm)?) / scale;
            fine_gap = (right - left).abs();
            fine_grad = (right + left) * S::c(0.5);
        }
        if fine_gap > S::c(5.0) * h {
            differentiable = false;
        }
        gradient_chart[axis] = fine_grad;
    }
    let gradient = chart_to_intrinsic(&gradient_chart);
    Ok(Differentiability { differentiable, gradient_chart, gradient })
}

/// Largest second difference quotient of the value over interior nodes and
/// single-mesh-step directions (chart axes and state-exchange edges), over
/// all time slices. A finite value certifies discrete semiconcavity at the
/// mesh scale.
pub fn semiconcavity_estimate<S: Real>(value: &GridField<S>) -> S {
    let grid = &value.grid;
    let m = grid.chart_dim();
    let h = grid.h();
    let mut worst = S::neg_infinity();
    let mut dirs: Vec<(Vec<i32>, S)> = Vec::new();
    for axis in 0..m {
        let mut d = vec![0i32; m];
        d[axis] = 1;
        dirs.push((d, h * h));
    }
    for a in 0..m {
        for b in 0..m {
            if a < b {
                let mut d = vec![0i32; m];
                d[a] = 1;
                d[b] = -1;
                dirs.push((d, S::c(2.0) * h * h));
            }
        }
    }
    for t in 0..value.times.len() {
        for node in 0..grid.len() {
            for (delta, norm2) in &dirs {
                let up = grid.shifted(node, delta);
                let minus: Vec<i32> = delta.iter().map(|v| -v).collect();
                let dn = grid.shifted(node, &minus);
                if let (Some(u), Some(l)) = (up, dn) {
                    let q = (value.at(t, u, 0) - S::c(2.0) * value.at(t, node, 0)
                        + value.at(t, l, 0))
                        / *norm2;
                    worst = worst.max(q);
                }
            }
        }
    }
    worst
}

/// Planner minimiser rollouts from a start point.
#[derive(Clone, Debug)]
pub struct MfcpSolution<S: Real> {
    /// Candidate optimal paths with their costs (one when the value is
    /// differentiable at the start, several from perturbed starts otherwise).
    pub minimizers: Vec<(Trajectory<S>, S)>,
    /// Interpolated grid value at the start point.
    pub value_at_start: S,
    pub differentiable: bool,
}

/// Rolls the forward flow under the value-gradient clamp feedback, then
/// refines with forward-backward sweeps, returning the better of the two.
/// At a non-differentiable start all rollouts from mesh-step-perturbed
/// starts are returned instead of an arbitrary selection.
pub fn mfcp_minimize<S: Real>(
    model: &ModelSpec<S>,
    value: &ValueField<S>,
    t0: S,
    p0: &SimplexPoint<S>,
    steps: usize,
) -> Result<MfcpSolution<S>> {
    let grid = &value.value.grid;
    let h = grid.h();
    let test = differentiability_test(&value.value, t0, p0)?;
    let value_at_start = value
        .value
        .interpolate(t0, &p0.to_chart())?
        .0[0];
    let starts: Vec<SimplexPoint<S>> = if test.differentiable {
        vec![p0.clone()]
    } else {
        let m = grid.chart_dim();
        let mut list = Vec::new();
        for axis in 0..m {
            for dir in [S::one(), -S::one()] {
                let mut x = p0.to_chart().coords().to_vec();
                x[axis] = x[axis] + dir * h;
                list.push(ChartPoint::new_clamped(&x).from_chart());
            }
        }
        list
    };
    let gradient = value.gradient_field(1);
    let mut minimizers = Vec::new();
    for start in &starts {
        let rolled = rollout_feedback(model, &gradient, t0, start, steps)?;
        let rolled_cost = mfcp_cost(model, &rolled.controls, &rolled.times, start)?;
        let refined = refine_sweeps(model, t0, start, steps, &rolled);
        let (best_traj, best_cost) = match refined {
            Some(path) => {
                let c = mfcp_cost(model, &path.controls, &path.times, start)?;
                if c < rolled_cost {
                    (path, c)
                } else {
                    (rolled, rolled_cost)
                }
            }
            None => (rolled, rolled_cost),
        };
        minimizers.push((best_traj, best_cost));
    }
    Ok(MfcpSolution { minimizers, value_at_start, differentiable: test.differentiable })
}

fn rollout_feedback<S: Real>(
    model: &ModelSpec<S>,
    gradient: &GridField<S>,
    t0: S,
    p0: &SimplexPoint<S>,
    steps: usize,
) -> Result<Trajectory<S>> {
    let d = model.d;
    let cap = model.cap();
    let times = GridField::<S>::time_mesh(t0, model.horizon, steps);
    let feedback = |t: S, p: &SimplexPoint<S>| -> Result<ControlMatrix<S>> {
        let (w, _) = gradient.interpolate(t, &p.to_chart())?;
        let mut c = ControlMatrix::zero(d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    c.set_rate(i, j, a_star(w[i] - w[j], cap));
                }
            }
        }
        Ok(c)
    };
    let mut points = vec![p0.clone()];
    let mut controls = vec![feedback(t0, p0)?];
    let mut q = p0.coords().to_vec();
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let ctrl = controls[k].clone();
        let lookup = |_t: S| ctrl.clone();
        let mut next = rk4_forward(&q, times[k], dt, &lookup);
        for v in next.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mass: S = next.iter().copied().sum();
        for v in next.iter_mut() {
            *v = *v / mass;
        }
        let p = SimplexPoint::new(next.clone())?;
        controls.push(feedback(times[k + 1], &p)?);
        points.push(p);
        q = next;
    }
    Ok(Trajectory { times, points, controls, values: None, clip_mass: S::zero() })
}

fn refine_sweeps<S: Real>(
    model: &ModelSpec<S>,
    t0: S,
    p0: &SimplexPoint<S>,
    steps: usize,
    warm: &Trajectory<S>,
) -> Option<Trajectory<S>> {
    let _ = (t0, steps);
    let mut guess = warm.clone();
    let mut damping = S::c(0.5);
    let mut prev_delta = S::infinity();
    for _ in 0..300 {
        let br = best_response(model, &guess, p0).ok()?;
        let flow = solve_fp(&br.controls, &guess.times, p0).ok()?;
        let delta = flow.sup_distance(&guess);
        if delta <= S::c(1e-9) {
            let mut out = flow;
            out.controls = br.controls;
            out.values = Some(br.values);
            return Some(out);
        }
        if delta > prev_delta {
            damping = (damping * S::c(0.7)).max(S::c(0.05));
        }
        prev_delta = delta;
        for (gp, fp) in guess.points.iter_mut().zip(&flow.points) {
            let mixed: Vec<S> = gp
                .coords()
                .iter()
                .zip(fp.coords())
                .map(|(&a, &b)| (S::one() - damping) * a + damping * b)
                .collect();
            *gp = SimplexPoint::new(mixed).ok()?;
        }
    }
    None
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

    fn symmetric_rates(d: usize, a: f64) -> ControlMatrix<f64> {
        let mut c = ControlMatrix::zero(d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    c.set_rate(i, j, a);
                }
            }
        }
        c
    }

    #[test]
    fn forward_solve_matches_closed_form() {
        // symmetric two-state exchange at rate a relaxes to 1/2 like e^{-2at}
        let a = 1.0;
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 200);
        let controls = vec![symmetric_rates(2, a); times.len()];
        let q0 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
        let q = solve_fp(&controls, &times, &q0).unwrap();
        for (k, t) in times.iter().enumerate() {
            let exact = 0.5 + (0.9 - 0.5) * (-2.0 * a * t).exp();
            assert!((q.points[k].get(0) - exact).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn forward_solve_frozen_and_mass() {
        let times = GridField::<f64>::time_mesh(0.0, 2.0, 100);
        let q0 = SimplexPoint::new(vec![0.3, 0.5, 0.2]).unwrap();
        // zero control freezes the state
        let frozen = solve_fp(&vec![ControlMatrix::zero(3); times.len()], &times, &q0).unwrap();
        for p in &frozen.points {
            for i in 0..3 {
                assert_eq!(p.get(i), q0.get(i));
            }
        }
        // arbitrary control keeps unit mass at every step
        let mut c = ControlMatrix::zero(3);
        c.set_rate(0, 1, 0.8);
        c.set_rate(1, 2, 0.4);
        c.set_rate(2, 0, 1.3);
        let q = solve_fp(&vec![c; times.len()], &times, &q0).unwrap();
        for p in &q.points {
            let mass: f64 = p.coords().iter().sum();
            assert!((mass - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn game_cost_terminal_only() {
        // zero control and zero running cost leave only the terminal term
        let m = ModelSpec::<f64>::builtin_d2(1.0);
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 50);
        let p_env_point = SimplexPoint::new(vec![0.7, 0.3]).unwrap();
        let env = Trajectory {
            times: times.clone(),
            points: vec![p_env_point.clone(); times.len()],
            controls: vec![ControlMatrix::zero(2); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let q0 = SimplexPoint::new(vec![0.2, 0.8]).unwrap();
        let zero = vec![ControlMatrix::zero(2); times.len()];
        let got = mfg_cost(&m, &zero, &env, &q0).unwrap();
        let g = m.terminal_cost(&p_env_point);
        let want = q0.get(0) * g[0] + q0.get(1) * g[1];
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn planner_cost_constant_state() {
        // benchmark model, zero control, state at the centre: only G remains
        let m = ModelSpec::<f64>::builtin_d2(3.0);
        let times = GridField::<f64>::time_mesh(0.0, 3.0, 60);
        let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let zero = vec![ControlMatrix::zero(2); times.len()];
        let got = mfcp_cost(&m, &zero, &times, &p0).unwrap();
        assert_abs_diff_eq!(got, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn running_cost_scales_quadratically() {
        // frozen-q quadrature isolates the control part of the running cost
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 40);
        let qbar = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
        let cost_of = |scale: f64| -> f64 {
            let mut c = ControlMatrix::zero(2);
            c.set_rate(0, 1, 0.3 * scale);
            c.set_rate(1, 0, 0.7 * scale);
            let integrand: Vec<f64> = times
                .iter()
                .map(|_| (0..2).map(|i| qbar.get(i) * lagrangian(i, &c)).sum())
                .collect();
            trapezoid(&times, &integrand)
        };
        assert_abs_diff_eq!(cost_of(2.0), 4.0 * cost_of(1.0), epsilon = 1e-12);
    }

    #[test]
    fn best_response_symmetric_terminal() {
        // terminal cost equal across states: flat values, zero control
        let run: crate::model::StateFn<f64> = Arc::new(|_| vec![0.0, 0.0, 0.0]);
        let term: crate::model::StateFn<f64> = Arc::new(|_| vec![0.4, 0.4, 0.4]);
        let m = ModelSpec::new(3, 1.0, run, term, None, None, Some(2.0), "flat").unwrap();
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 50);
        let env = Trajectory {
            times: times.clone(),
            points: vec![SimplexPoint::uniform(3); times.len()],
            controls: vec![ControlMatrix::zero(3); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let q0 = SimplexPoint::dirac(3, 1);
        let br = best_response(&m, &env, &q0).unwrap();
        for u in &br.values {
            for v in u {
                assert_abs_diff_eq!(*v, 0.4, epsilon = 1e-12);
            }
        }
        for c in &br.controls {
            assert_eq!(c.sup_norm(), 0.0);
        }
        assert_abs_diff_eq!(br.cost, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn best_response_brute_force_oracle() {
        // centre environment of the two-state benchmark: terminal costs
        // vanish there, so the zero control (cost 0) is optimal; sweep a
        // symmetric 21^3 piecewise-constant family as an independent check.
        let m = ModelSpec::<f64>::builtin_d2(2.0);
        let times = GridField::<f64>::time_mesh(0.0, 2.0, 60);
        let env = Trajectory {
            times: times.clone(),
            points: vec![SimplexPoint::uniform(2); times.len()],
            controls: vec![ControlMatrix::zero(2); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let q0 = SimplexPoint::new(vec![0.8, 0.2]).unwrap();
        let br = best_response(&m, &env, &q0).unwrap();
        let mut brute = f64::INFINITY;
        let blocks = times.len() / 3;
        for b1 in 0..21 {
            for b2 in 0..21 {
                for b3 in 0..21 {
                    let vals = [b1, b2, b3].map(|b| 2.0 * b as f64 / 20.0);
                    let controls: Vec<ControlMatrix<f64>> = (0..times.len())
                        .map(|k| symmetric_rates(2, vals[(k / blocks).min(2)]))
                        .collect();
                    let c = mfg_cost(&m, &controls, &env, &q0).unwrap();
                    if c < brute {
                        brute = c;
                    }
                }
            }
        }
        assert!((br.cost - brute).abs() <= 1e-2, "br {} brute {}", br.cost, brute);
    }

    #[test]
    fn best_response_spot_optimality() {
        // best-response cost never beaten by random admissible controls
        let m = ModelSpec::<f64>::builtin_d2(1.5);
        let times = GridField::<f64>::time_mesh(0.0, 1.5, 80);
        let envp = SimplexPoint::new(vec![0.65, 0.35]).unwrap();
        let env = Trajectory {
            times: times.clone(),
            points: vec![envp; times.len()],
            controls: vec![ControlMatrix::zero(2); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let q0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let br = best_response(&m, &env, &q0).unwrap();
        // value process bound
        let bound = m.cap() / 2.0;
        for u in &br.values {
            for v in u {
                assert!(v.abs() <= bound + 1e-8);
            }
        }
        for s in 0..50u64 {
            let a12 = 2.0 * crate::rng::uniform_at(5, s, 0, 0);
            let a21 = 2.0 * crate::rng::uniform_at(5, s, 1, 0);
            let mut c = ControlMatrix::zero(2);
            c.set_rate(0, 1, a12);
            c.set_rate(1, 0, a21);
            let cost = mfg_cost(&m, &vec![c; times.len()], &env, &q0).unwrap();
            assert!(br.cost <= cost + 1e-6, "beaten by ({a12}, {a21}): {} vs {}", br.cost, cost);
        }
    }

    #[test]
    fn trivial_equilibrium_zero_costs() {
        let m = zero_model(3, 1.0);
        let p0 = SimplexPoint::new(vec![0.5, 0.3, 0.2]).unwrap();
        let out = mfg_fixed_point(&m, &p0, 100, 4, 9, &Workers::serial()).unwrap();
        assert_eq!(out.equilibria.len(), 1);
        let eq = &out.equilibria[0];
        assert!(eq.sup_distance(&Trajectory {
            times: eq.times.clone(),
            points: vec![p0.clone(); eq.times.len()],
            controls: vec![ControlMatrix::zero(3); eq.times.len()],
            values: None,
            clip_mass: 0.0,
        }) <= 1e-9);
        for c in &eq.controls {
            assert_eq!(c.sup_norm(), 0.0);
        }
    }

    #[test]
    fn pontryagin_zero_costs() {
        let m = zero_model(3, 1.0);
        let p0 = SimplexPoint::new(vec![0.4, 0.35, 0.25]).unwrap();
        let path = pontryagin_solve(&m, 0.0, &p0, 100, None).unwrap();
        for (x, z) in path.x.iter().zip(&path.z) {
            for (a, b) in x.iter().zip(p0.coords()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
            for v in z {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
            }
        }
        assert!(path.residual <= 1e-9);
    }

    #[test]
    fn value_solver_zero_and_constant() {
        let zero = zero_model(2, 1.0);
        let grid = SimplexGrid::<f64>::new(2, 40).unwrap();
        let vf = hjb_solve(&zero, grid.clone(), 1e-3).unwrap();
        for t in 0..vf.value.times.len() {
            for n in 0..grid.len() {
                assert_eq!(vf.value.at(t, n, 0), 0.0);
            }
        }
        // constant terminal potential propagates unchanged
        let run: crate::model::StateFn<f64> = Arc::new(|_| vec![0.0, 0.0]);
        let term: crate::model::StateFn<f64> = Arc::new(|_| vec![0.7, 0.7]);
        let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        let gp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.7);
        let m = ModelSpec::new(2, 1.0, run, term, Some(fp), Some(gp), Some(2.0), "const").unwrap();
        let vf = hjb_solve(&m, grid.clone(), 1e-3).unwrap();
        for t in 0..vf.value.times.len() {
            for n in 0..grid.len() {
                assert_abs_diff_eq!(vf.value.at(t, n, 0), 0.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn value_solver_monotone_random_pairs() {
        // pointwise-ordered terminal data produce pointwise-ordered values
        let grid = SimplexGrid::<f64>::new(2, 30).unwrap();
        for s in 0..5u64 {
            let a = 1.0 + crate::rng::uniform_at(21, s, 0, 0);
            let b = crate::rng::uniform_at(21, s, 1, 0);
            let c = 0.2 + 0.5 * crate::rng::uniform_at(21, s, 2, 0);
            let mk = |bump: f64| -> ModelSpec<f64> {
                let run: crate::model::StateFn<f64> = Arc::new(|_| vec![0.0, 0.0]);
                let gpot = move |p: &SimplexPoint<f64>| -> f64 {
                    let x = p.get(0);
                    a * x * (1.0 - x) + b * x + bump * (-(x - 0.5) * (x - 0.5) / 0.02).exp()
                };
                let term: crate::model::StateFn<f64> = Arc::new(move |p| {
                    let g =
                        crate::simplex::intrinsic_gradient(
                            |q: &[f64]| gpot(&SimplexPoint::new(q.to_vec()).unwrap()),
                            p,
                            1e-6,
                        )
                        .unwrap_or(vec![0.0, 0.0]);
                    g
                });
                let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
                let gp: crate::model::PotentialFn<f64> = Arc::new(move |p| gpot(p));
                ModelSpec::new(2, 0.5, run, term, Some(fp), Some(gp), Some(3.0), "pair").unwrap()
            };
            let lo = hjb_solve(&mk(0.0), grid.clone(), 2e-3).unwrap();
            let hi = hjb_solve(&mk(c), grid.clone(), 2e-3).unwrap();
            for t in 0..lo.value.times.len() {
                for n in 0..grid.len() {
                    assert!(
                        lo.value.at(t, n, 0) <= hi.value.at(t, n, 0) + 1e-8,
                        "order violated at t={t} n={n}"
                    );
                }
            }
        }
    }

    #[test]
    fn differentiability_probe() {
        let grid = SimplexGrid::<f64>::new(2, 100).unwrap();
        let times = vec![0.0, 1.0];
        // smooth field x^2
        let mut smooth = GridField::zeros(grid.clone(), times.clone(), 1);
        for t in 0..2 {
            for n in 0..grid.len() {
                let x = grid.chart(n).coords()[0];
                smooth.set(t, n, 0, x * x);
            }
        }
        let p = SimplexPoint::new(vec![0.3, 0.7]).unwrap();
        let out = differentiability_test(&smooth, 0.0, &p).unwrap();
        assert!(out.differentiable);
        assert!((out.gradient_chart[0] - 0.6).abs() <= 2.0 * grid.h());
        // kinked field |x - 1/2|
        let mut kinked = GridField::zeros(grid.clone(), times, 1);
        for t in 0..2 {
            for n in 0..grid.len() {
                let x = grid.chart(n).coords()[0];
                kinked.set(t, n, 0, (x - 0.5).abs());
            }
        }
        let mid = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        assert!(!differentiability_test(&kinked, 0.0, &mid).unwrap().differentiable);
        let off = SimplexPoint::new(vec![0.25, 0.75]).unwrap();
        assert!(differentiability_test(&kinked, 0.0, &off).unwrap().differentiable);
    }

    #[test]
    fn semiconcavity_probe() {
        let grid = SimplexGrid::<f64>::new(2, 50).unwrap();
        let times = vec![0.0];
        let mut concave = GridField::zeros(grid.clone(), times.clone(), 1);
        let mut vee = GridField::zeros(grid.clone(), times, 1);
        for n in 0..grid.len() {
            let x = grid.chart(n).coords()[0];
            concave.set(0, n, 0, -x * x);
            vee.set(0, n, 0, (x - 0.5).abs());
        }
        assert_abs_diff_eq!(semiconcavity_estimate(&concave), -2.0, epsilon = 1e-6);
        let c = semiconcavity_estimate(&vee);
        assert_abs_diff_eq!(c, 2.0 / grid.h(), epsilon = 1e-6);
    }

    #[test]
    fn planner_minimizer_zero_model() {
        let m = zero_model(2, 1.0);
        let grid = SimplexGrid::<f64>::new(2, 40).unwrap();
        let vf = hjb_solve(&m, grid, 1e-3).unwrap();
        let p0 = SimplexPoint::new(vec![0.4, 0.6]).unwrap();
        let sol = mfcp_minimize(&m, &vf, 0.0, &p0, 100).unwrap();
        assert!(sol.differentiable);
        assert_eq!(sol.minimizers.len(), 1);
        let (traj, cost) = &sol.minimizers[0];
        assert!(cost.abs() <= 1e-10);
        for c in &traj.controls {
            assert!(c.sup_norm() <= 1e-10);
        }
    }
}
