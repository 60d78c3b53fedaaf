//! Vanishing-viscosity experiments: noise schedules, the per-intensity
//! sweep that tabulates gaps between the viscous fields and their
//! noise-free references, empirical trajectory selection statistics, and
//! the value-selection check on the differentiable region.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::inviscid::{
    best_response, differentiability_test, hjb_solve, mfcp_minimize, Trajectory, ValueField,
};
use crate::model::{ControlMatrix, ModelSpec, NoiseConfig};
use crate::parallel::Workers;
use crate::scalar::Real;
use crate::simplex::{GridField, SimplexGrid, SimplexPoint};
use crate::viscous::{
    cost_mc, simulate, solve_viscous_fields, Ensemble, FieldFeedback, ViscousFields,
};

/// Noise schedule for a vanishing-viscosity sweep: radii follow
/// `delta = eps^a` (clamped to 1/2), `theta = delta / 4`, and the peak level
/// is `kappa2 / eps^2`.
#[derive(Clone, Debug)]
pub struct SelectionSchedule<S: Real> {
    pub eps_list: Vec<S>,
    /// Exponent of the radius rule (default 1).
    pub a: S,
    pub kappa0: S,
    pub kappa2: S,
}

impl<S: Real> SelectionSchedule<S> {
    /// Default schedule for a model: `a = 1`, plateau `0.045`, peak constant
    /// `M / 2`. The repulsion is deliberately weak: its only job is to
    /// discourage excursions below the peak band, while a strong plateau or
    /// peak pins the dynamics away from minimisers that approach the
    /// boundary and parks the rest point on a repulsion ramp, inflating the
    /// correction-cost contribution.
    pub fn standard(model: &ModelSpec<S>, eps_list: Vec<S>) -> Result<Self> {
        let s = SelectionSchedule {
            eps_list,
            a: S::one(),
            kappa0: S::c(0.045),
            kappa2: S::c(0.5) * model.cap(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn noise_config(&self, eps: S) -> Result<NoiseConfig<S>> {
        let delta = eps.powf(self.a).min(S::c(0.5));
        let theta = delta * S::c(0.25);
        NoiseConfig::new(eps, theta, delta, self.kappa0, self.kappa2)
    }

    /// Hard validity assertions run before any solve.
    pub fn validate(&self) -> Result<()> {
        if self.eps_list.is_empty() {
            return Err(Error::InvalidConfig("empty intensity list".into()));
        }
        for w in self.eps_list.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidConfig("intensity list must decrease".into()));
            }
        }
        for &eps in &self.eps_list {
            let cfg = self.noise_config(eps)?;
            if S::c(2.0) * cfg.theta > cfg.delta {
                return Err(Error::InvalidConfig("radius rule broke 2 theta <= delta".into()));
            }
            if cfg.kappa_eps() < self.kappa0 {
                return Err(Error::InvalidConfig(format!(
                    "peak below plateau at eps {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Numerical knobs of the sweep.
#[derive(Clone, Debug)]
pub struct SweepConfig<S: Real> {
    /// Lattice subdivisions for the viscous solves.
    pub subdivisions: usize,
    /// Stored time slices for the grid fields.
    pub store_steps: usize,
    /// Distance from the boundary defining the compact comparison set.
    pub margin: S,
    /// Monte-Carlo paths for the equilibrium ensemble.
    pub n_paths: usize,
    /// Cap on the simulation step; each intensity steps at
    /// `min(dt_sim, 0.02 / kappa_eps)` so the repulsion peak stays resolved.
    pub dt_sim: S,
    pub seed: u64,
    /// Time slices sampled for the reference per-state values.
    pub reference_slices: usize,
}

impl<S: Real> SweepConfig<S> {
    pub fn desk_scale() -> Self {
        SweepConfig {
            subdivisions: 100,
            store_steps: 300,
            margin: S::c(0.2),
            n_paths: 2000,
            dt_sim: S::c(1e-3),
            seed: 7,
            reference_slices: 7,
        }
    }
}

/// One row of the convergence report.
#[derive(Clone, Debug)]
pub struct SweepRow<S: Real> {
    pub eps: S,
    pub delta: S,
    pub theta: S,
    pub kappa_eps: S,
    pub sup_gap_value: S,
    pub l1_gap_gradient: S,
    pub l1_gap_state_value: S,
    pub xi: S,
    pub xi_se: S,
    pub traj_dist: S,
    pub weights: Vec<S>,
    pub boundary_hit_rate: S,
    /// Set when the pipeline failed for this intensity.
    pub failure: Option<String>,
}

/// Sweep output: the tabulated rows plus the per-intensity bundles, kept for
/// downstream checks.
pub struct SweepOutput<S: Real> {
    pub rows: Vec<SweepRow<S>>,
    pub bundles: Vec<Option<ViscousFields<S>>>,
    pub ensembles: Vec<Option<Ensemble<S>>>,
    /// Noise-free planner value used as the reference.
    pub reference_value: ValueField<S>,
    /// Planner minimisers from the start point (candidate selection set).
    pub minimizers: Vec<(Trajectory<S>, S)>,
    /// Differentiable sampled reference points (per-state values and
    /// reference gradients), reused by the selection identity check.
    pub reference_points: Vec<RefPointLike<S>>,
}

/// Full vanishing-viscosity sweep: for each intensity, solve the viscous
/// bundle, run the equilibrium ensemble, and tabulate the gaps against the
/// noise-free references. Per-intensity failures are recorded in the row and
/// the sweep continues.
pub fn run_sweep<S: Real>(
    model: &ModelSpec<S>,
    p0: &SimplexPoint<S>,
    schedule: &SelectionSchedule<S>,
    cfg: &SweepConfig<S>,
    workers: &Workers,
) -> Result<SweepOutput<S>> {
    schedule.validate()?;
    if !p0.is_interior(cfg.margin * S::c(0.5)) {
        return Err(Error::InvalidPoint("start must be inside the compact set".into()));
    }
    let grid = SimplexGrid::new(model.d, cfg.subdivisions)?;
    let dt_ref = grid.h() / (S::from_usize(model.d).unwrap() * model.cap() * S::c(2.0));
    let reference = hjb_solve(model, grid.clone(), dt_ref)?;
    let ref_gradient = reference.gradient_field(1);
    let minimizers = mfcp_minimize(model, &reference, S::zero(), p0, 4 * cfg.store_steps)?
        .minimizers;

    // reference per-state values on sampled slices over the compact set,
    // restricted to nodes where the reference value is differentiable
    let nodes_in_k: Vec<usize> = (0..grid.len())
        .filter(|&n| {
            let p = grid.point(n);
            p.coords().iter().all(|&v| v >= cfg.margin)
        })
        .collect();
    let slice_stride = (cfg.store_steps / (cfg.reference_slices + 1)).max(1);
    let sample_slices: Vec<usize> = (1..=cfg.reference_slices)
        .map(|k| k * slice_stride)
        .filter(|&s| s < cfg.store_steps)
        .collect();
    let times = GridField::<S>::time_mesh(S::zero(), model.horizon, cfg.store_steps);
    let ref_points: Vec<RefPointLike<S>> = {
        let items: Vec<(usize, usize)> = sample_slices
            .iter()
            .flat_map(|&s| nodes_in_k.iter().map(move |&n| (s, n)))
            .collect();
        let computed = workers.map_indexed(items.len(), |i| {
            let (slice, node) = items[i];
            let t = times[slice];
            let p = grid.point(node);
            let probe = differentiability_test(&reference.value, t, &p).ok()?;
            if !probe.differentiable {
                return None;
            }
            let values =
                reference_state_values(model, &ref_gradient, t, &p, cfg.store_steps).ok()?;
            Some(RefPointLike { slice, node, values, gradient: probe.gradient })
        });
        computed.into_iter().flatten().collect()
    };

    // the grid solves run on independent workers; the Monte-Carlo stage then
    // reuses the full pool per intensity
    let solved = workers.map_indexed(schedule.eps_list.len(), |idx| {
        let eps = schedule.eps_list[idx];
        let ncfg = schedule.noise_config(eps)?;
        solve_viscous_fields(model, &ncfg, grid.clone(), cfg.store_steps)
    });

    let mut rows = Vec::new();
    let mut bundles = Vec::new();
    let mut ensembles = Vec::new();
    for (idx, solve) in solved.into_iter().enumerate() {
        let eps = schedule.eps_list[idx];
        let run = solve.and_then(|fields| {
            run_one_intensity(
                model, p0, schedule, cfg, eps, &grid, &reference, &ref_points, &times, fields,
                workers,
            )
        });
        match run {
            Ok((row, fields, ens)) => {
                rows.push(row);
                bundles.push(Some(fields));
                ensembles.push(Some(ens));
            }
            Err(e) => {
                let ncfg = schedule.noise_config(eps);
                let (delta, theta, kappa_eps) = match ncfg {
                    Ok(c) => (c.delta, c.theta, c.kappa_eps()),
                    Err(_) => (S::zero(), S::zero(), S::zero()),
                };
                rows.push(SweepRow {
                    eps,
                    delta,
                    theta,
                    kappa_eps,
                    sup_gap_value: S::nan(),
                    l1_gap_gradient: S::nan(),
                    l1_gap_state_value: S::nan(),
                    xi: S::nan(),
                    xi_se: S::nan(),
                    traj_dist: S::nan(),
                    weights: Vec::new(),
                    boundary_hit_rate: S::nan(),
                    failure: Some(e.to_string()),
                });
                bundles.push(None);
                ensembles.push(None);
            }
        }
    }
    // distances and weights against the minimiser set
    for (row, ens) in rows.iter_mut().zip(&ensembles) {
        if let Some(ens) = ens {
            let sets: Vec<&Trajectory<S>> = minimizers.iter().map(|(t, _)| t).collect();
            if let Ok(stat) = trajectory_distance(ens, &sets) {
                row.traj_dist = stat.mean_distance;
                row.weights = stat.weights;
            }
        }
    }
    Ok(SweepOutput {
        rows,
        bundles,
        ensembles,
        reference_value: reference,
        minimizers,
        reference_points: ref_points,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one_intensity<S: Real>(
    model: &ModelSpec<S>,
    p0: &SimplexPoint<S>,
    schedule: &SelectionSchedule<S>,
    cfg: &SweepConfig<S>,
    eps: S,
    grid: &Arc<SimplexGrid<S>>,
    reference: &ValueField<S>,
    ref_points: &[RefPointLike<S>],
    times: &[S],
    fields: ViscousFields<S>,
    workers: &Workers,
) -> Result<(SweepRow<S>, ViscousFields<S>, Ensemble<S>)> {
    let ncfg = schedule.noise_config(eps)?;
    // gaps against the noise-free references on the compact set
    let mut sup_gap = S::zero();
    let mut l1_grad = S::zero();
    let m = grid.chart_dim();
    let cell = grid.h().powi(m as i32);
    let dt_out = times[1] - times[0];
    let ref_grad = reference.gradient_field(1);
    for (t_idx, &t) in times.iter().enumerate() {
        for node in 0..grid.len() {
            let p = grid.point(node);
            if !p.coords().iter().all(|&v| v >= cfg.margin) {
                continue;
            }
            let v_ref = reference.value.interpolate(t, &grid.chart(node))?.0[0];
            sup_gap = sup_gap.max((fields.value.at(t_idx, node, 0) - v_ref).abs());
            let gr = ref_grad.interpolate(t, &grid.chart(node))?.0;
            let mut acc = S::zero();
            for c in 0..model.d {
                acc = acc + (fields.gradient.at(t_idx, node, c) - gr[c]).abs();
            }
            l1_grad = l1_grad + acc * cell * dt_out;
        }
    }
    // L1 per-state value gap on the differentiable sampled region
    let mut l1_u = S::zero();
    let mut count = 0usize;
    for rp in ref_points {
        let mut acc = S::zero();
        for c in 0..model.d {
            acc = acc + (fields.state_value.at(rp.slice, rp.node, c) - rp.values[c]).abs();
        }
        l1_u = l1_u + acc;
        count += 1;
    }
    if count > 0 {
        l1_u = l1_u / S::from_usize(count).unwrap();
    }
    // equilibrium ensemble driven by the viscous gradient feedback
    let feedback = FieldFeedback { gradient: &fields.gradient, cap: model.cap() };
    let dt_sim = cfg.dt_sim.min(S::c(0.02) / ncfg.kappa_eps().max(S::one()));
    let ensemble = simulate(
        &feedback,
        &ncfg,
        S::zero(),
        model.horizon,
        p0,
        Some(p0),
        dt_sim,
        cfg.store_steps.min(300),
        cfg.n_paths,
        cfg.seed,
        workers,
    )?;
    let mc = cost_mc(&ensemble, model, &feedback, Some(&fields.correction))?;
    let _ = mc.xi;
    // The tagged mass starts at the population here, so the correction
    // contribution contracts to <p, theta>(p_t); at nodes the contraction
    // cancels every eps^2 term of theta exactly (antisymmetry in the state
    // pair), leaving the repulsion-slope part, which interpolates cleanly.
    let xi_field = contracted_correction(&fields.correction);
    let mut xi_samples = Vec::with_capacity(ensemble.n_paths);
    for path in 0..ensemble.n_paths {
        let mut integrand = Vec::with_capacity(ensemble.times.len());
        for (k, &t) in ensemble.times.iter().enumerate() {
            let p = SimplexPoint::new(ensemble.state(path, k).to_vec())?;
            integrand.push(xi_field.interpolate(t, &p.to_chart())?.0[0]);
        }
        let mut acc = S::zero();
        for k in 0..ensemble.times.len() - 1 {
            let dt = ensemble.times[k + 1] - ensemble.times[k];
            acc = acc + dt * S::c(0.5) * (integrand[k] + integrand[k + 1]);
        }
        xi_samples.push(acc.abs());
    }
    let n = S::from_usize(xi_samples.len()).unwrap();
    let xi: S = xi_samples.iter().copied().sum::<S>() / n;
    let var: S = xi_samples.iter().map(|&s| (s - xi) * (s - xi)).sum::<S>()
        / (n - S::one()).max(S::one());
    let xi_se = (var / n).sqrt();
    let row = SweepRow {
        eps,
        delta: ncfg.delta,
        theta: ncfg.theta,
        kappa_eps: ncfg.kappa_eps(),
        sup_gap_value: sup_gap,
        l1_gap_gradient: l1_grad,
        l1_gap_state_value: l1_u,
        xi,
        xi_se,
        traj_dist: S::nan(),
        weights: Vec::new(),
        boundary_hit_rate: ensemble.boundary_hit_rate(),
        failure: None,
    };
    Ok((row, fields, ensemble))
}

/// Population-contracted correction field `<p, theta>(node)`.
pub fn contracted_correction<S: Real>(correction: &GridField<S>) -> GridField<S> {
    let grid = correction.grid.clone();
    let d = grid.states();
    let mut out = GridField::zeros(grid.clone(), correction.times.clone(), 1);
    for t in 0..correction.times.len() {
        for node in 0..grid.len() {
            let p = grid.point(node);
            let mut acc = S::zero();
            for i in 0..d {
                acc = acc + p.get(i) * correction.at(t, node, i);
            }
            out.set(t, node, 0, acc);
        }
    }
    out
}

/// Reference point data shared with the sweep internals.
pub struct RefPointLike<S: Real> {
    pub slice: usize,
    pub node: usize,
    pub values: Vec<S>,
    pub gradient: Vec<S>,
}

/// Per-state reference values at `(t, p)`: the planner minimiser is rolled
/// from the point under the value-gradient feedback, and the per-state
/// values are the backward best-response values along it (point-mass
/// starts).
pub fn reference_state_values<S: Real>(
    model: &ModelSpec<S>,
    reference_gradient: &GridField<S>,
    t: S,
    p: &SimplexPoint<S>,
    steps: usize,
) -> Result<Vec<S>> {
    let d = model.d;
    let cap = model.cap();
    let times = GridField::<S>::time_mesh(t, model.horizon, steps.max(10));
    let mut points = vec![p.clone()];
    let mut controls: Vec<ControlMatrix<S>> = Vec::with_capacity(times.len());
    let mut state = p.clone();
    for k in 0..times.len() {
        let (w, _) = reference_gradient.interpolate(times[k], &state.to_chart())?;
        let rates = ControlMatrix::from_values(&w, cap);
        controls.push(rates.clone());
        if k + 1 < times.len() {
            let dt = times[k + 1] - times[k];
            let drift = rates.apply_drift(state.coords());
            let mut next: Vec<S> = state
                .coords()
                .iter()
                .zip(&drift)
                .map(|(&a, &b)| (a + dt * b).max(S::zero()))
                .collect();
            let mass: S = next.iter().copied().sum();
            for v in next.iter_mut() {
                *v = *v / mass;
            }
            state = SimplexPoint::new(next)?;
            points.push(state.clone());
        }
    }
    let path = Trajectory {
        times,
        points,
        controls,
        values: None,
        clip_mass: S::zero(),
    };
    let br = best_response(model, &path, p)?;
    let _ = d;
    Ok(br.values[0].clone())
}

/// Distance statistics of an ensemble against a candidate trajectory set.
pub struct DistanceStats<S: Real> {
    /// Mean over paths of the sup-norm distance to the nearest candidate.
    pub mean_distance: S,
    /// Empirical assignment weights (sum to one).
    pub weights: Vec<S>,
}

/// For each path, the sup over stored times of the max-coordinate gap to
/// each candidate; reports the mean nearest distance and nearest-candidate
/// weights.
pub fn trajectory_distance<S: Real>(
    ensemble: &Ensemble<S>,
    candidates: &[&Trajectory<S>],
) -> Result<DistanceStats<S>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("empty candidate set".into()));
    }
    let mut counts = vec![0usize; candidates.len()];
    let mut total = S::zero();
    for path in 0..ensemble.n_paths {
        let mut best = S::infinity();
        let mut arg = 0usize;
        for (ci, cand) in candidates.iter().enumerate() {
            let mut sup = S::zero();
            for (k, &t) in ensemble.times.iter().enumerate() {
                let target = cand.point_at(t);
                let state = ensemble.state(path, k);
                for i in 0..ensemble.d {
                    sup = sup.max((state[i] - target.get(i)).abs());
                }
            }
            if sup < best {
                best = sup;
                arg = ci;
            }
        }
        counts[arg] += 1;
        total = total + best;
    }
    let n = S::from_usize(ensemble.n_paths).unwrap();
    Ok(DistanceStats {
        mean_distance: total / n,
        weights: counts
            .into_iter()
            .map(|c| S::from_usize(c).unwrap() / n)
            .collect(),
    })
}

/// Per-intensity aggregate error of the selection identity: mean over the
/// differentiable sampled region of
/// `sum_{i,j} |(U_i - U_j) - (dV_i - dV_j)|`.
pub fn value_selection_check<S: Real>(
    state_value: &GridField<S>,
    ref_points: &[RefPointLike<S>],
) -> S {
    if ref_points.is_empty() {
        return S::nan();
    }
    let d = state_value.width;
    let mut acc = S::zero();
    for rp in ref_points {
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let du = state_value.at(rp.slice, rp.node, i)
                        - state_value.at(rp.slice, rp.node, j);
                    let dv = rp.gradient[i] - rp.gradient[j];
                    acc = acc + (du - dv).abs();
                }
            }
        }
    }
    acc / S::from_usize(ref_points.len()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateFn;

    fn zero_model(d: usize, horizon: f64) -> ModelSpec<f64> {
        let run: StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
        let term: StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
        let fp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        let gp: crate::model::PotentialFn<f64> = Arc::new(|_| 0.0);
        ModelSpec::new(d, horizon, run, term, Some(fp), Some(gp), Some(1.0), "zero").unwrap()
    }

    #[test]
    fn schedule_validation() {
        let m = ModelSpec::<f64>::builtin_d2(1.0);
        assert!(SelectionSchedule::standard(&m, vec![]).is_err());
        assert!(SelectionSchedule::standard(&m, vec![0.2, 0.3]).is_err());
        let s = SelectionSchedule::standard(&m, vec![0.3, 0.2, 0.1]).unwrap();
        for &eps in &s.eps_list {
            let cfg = s.noise_config(eps).unwrap();
            assert!(2.0 * cfg.theta <= cfg.delta);
            assert!(cfg.kappa_eps() >= s.kappa0);
        }
        // peak below plateau rejected
        let mut bad = s.clone();
        bad.kappa0 = 1e6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_model_sweep_all_gaps_vanish() {
        let m = zero_model(2, 1.0);
        let schedule = SelectionSchedule::standard(&m, vec![0.4, 0.3]).unwrap();
        let cfg = SweepConfig {
            subdivisions: 20,
            store_steps: 40,
            margin: 0.2,
            n_paths: 50,
            dt_sim: 1e-3,
            seed: 5,
            reference_slices: 3,
        };
        let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let out = run_sweep(&m, &p0, &schedule, &cfg, &Workers::new(2)).unwrap();
        for row in &out.rows {
            assert!(row.failure.is_none(), "{:?}", row.failure);
            assert!(row.sup_gap_value <= 1e-10, "sup gap {}", row.sup_gap_value);
            assert!(row.l1_gap_gradient <= 1e-8, "gradient gap {}", row.l1_gap_gradient);
            assert!(row.l1_gap_state_value <= 1e-8, "state gap {}", row.l1_gap_state_value);
            assert!(row.xi <= 1e-10, "xi {}", row.xi);
            let wsum: f64 = row.weights.iter().sum();
            assert!((wsum - 1.0).abs() <= 1e-12);
        }
        // selection identity trivially zero
        for b in out.bundles.iter().flatten() {
            let v = value_selection_check(&b.state_value, &out.reference_points);
            assert!(v <= 1e-8, "identity {v}");
        }
    }

    #[test]
    fn distance_statistics() {
        // a deterministic ensemble sitting on a candidate: distance 0, weight 1
        let m = zero_model(2, 1.0);
        let cfg = NoiseConfig::without_repulsion(1e-9);
        let p0 = SimplexPoint::new(vec![0.65, 0.35]).unwrap();
        let ens = crate::viscous::simulate(
            &crate::viscous::ConstantFeedback(ControlMatrix::zero(2)),
            &cfg,
            0.0,
            1.0,
            &p0,
            None,
            1e-3,
            20,
            10,
            3,
            &Workers::serial(),
        )
        .unwrap();
        let times = GridField::<f64>::time_mesh(0.0, 1.0, 20);
        let frozen = Trajectory {
            times: times.clone(),
            points: vec![p0.clone(); times.len()],
            controls: vec![ControlMatrix::zero(2); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let off = Trajectory {
            times: times.clone(),
            points: vec![SimplexPoint::new(vec![0.2, 0.8]).unwrap(); times.len()],
            controls: vec![ControlMatrix::zero(2); times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let stat = trajectory_distance(&ens, &[&frozen, &off]).unwrap();
        assert!(stat.mean_distance <= 1e-6);
        assert_eq!(stat.weights, vec![1.0, 0.0]);
        assert!(trajectory_distance(&ens, &[]).is_err());
        let _ = m;
    }
}
