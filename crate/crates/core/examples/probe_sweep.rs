use mfg_core::inviscid::{mfcp_minimize, Trajectory};
use mfg_core::model::{ControlMatrix, ModelSpec};
use mfg_core::selection::{
    run_sweep, trajectory_distance, value_selection_check, SelectionSchedule, SweepConfig,
};
use mfg_core::simplex::SimplexPoint;
use mfg_core::viscous::{cost_mc, simulate, FieldFeedback};
use mfg_core::Workers;

fn main() {
    let t_start = std::time::Instant::now();
    let model = ModelSpec::<f64>::builtin_d2(3.0);
    let schedule = SelectionSchedule::standard(&model, vec![0.3, 0.2, 0.1]).unwrap();
    let cfg = SweepConfig::<f64>::desk_scale();
    let centre = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
    let workers = Workers::new(8);
    let out = run_sweep(&model, &centre, &schedule, &cfg, &workers).unwrap();
    println!("sweep took {:.0}s, {} reference points", t_start.elapsed().as_secs_f64(), out.reference_points.len());
    for row in &out.rows {
        println!(
            "eps={:.1} sup_gap={:.4} l1_dv={:.4} l1_u={:.4} xi={:.5}({:.5}) dist={:.4} w={:?} bhr={:.3} fail={:?}",
            row.eps, row.sup_gap_value, row.l1_gap_gradient, row.l1_gap_state_value,
            row.xi, row.xi_se, row.traj_dist, row.weights, row.boundary_hit_rate, row.failure
        );
    }
    for (i, b) in out.bundles.iter().enumerate() {
        if let Some(b) = b {
            let v = value_selection_check(&b.state_value, &out.reference_points);
            println!("eps={:.1}: selection identity L1 = {v:.4}", out.rows[i].eps);
        }
    }
    // criterion 5: MC planner cost vs grid value at the start, eps in {0.3, 0.2}
    for idx in [0usize, 1] {
        if let (Some(b), Some(_)) = (&out.bundles[idx], &out.ensembles[idx]) {
            let eps = out.rows[idx].eps;
            let ncfg = schedule.noise_config(eps).unwrap();
            let fb = FieldFeedback { gradient: &b.gradient, cap: model.cap() };
            let dt_sim = (0.02 / ncfg.kappa_eps()).min(1e-3);
            let ens = simulate(&fb, &ncfg, 0.0, 3.0, &centre, None, dt_sim, 300, 10_000, 23, &workers).unwrap();
            let mc = cost_mc(&ens, &model, &fb, None).unwrap();
            let gv = b.value.interpolate(0.0, &centre.to_chart()).unwrap().0[0];
            println!("crit5 eps={eps}: mc={:.4}(se {:.4}) grid={:.4} gap={:.4}", mc.planner.0, mc.planner.1, gv, (mc.planner.0 - gv).abs());
        }
    }
    // criterion 2: weights at the centre for eps = 0.1
    if let Some(ens) = &out.ensembles[2] {
        let rest = Trajectory {
            times: out.minimizers[0].0.times.clone(),
            points: vec![centre.clone(); out.minimizers[0].0.times.len()],
            controls: vec![ControlMatrix::zero(2); out.minimizers[0].0.times.len()],
            values: None,
            clip_mass: 0.0,
        };
        let mut cands: Vec<&Trajectory<f64>> = out.minimizers.iter().map(|(t, _)| t).collect();
        cands.push(&rest);
        let stat = trajectory_distance(ens, &cands).unwrap();
        println!("centre eps=0.1: weights {:?} mean dist {:.4}", stat.weights, stat.mean_distance);
    }
    // criterion 2: tilted start
    let tilted = SimplexPoint::new(vec![0.75, 0.25]).unwrap();
    if let Some(b) = &out.bundles[2] {
        let ncfg = schedule.noise_config(0.1).unwrap();
        let fb = FieldFeedback { gradient: &b.gradient, cap: model.cap() };
        let dt_sim = (0.02 / ncfg.kappa_eps()).min(1e-3);
        let ens = simulate(&fb, &ncfg, 0.0, 3.0, &tilted, None, dt_sim, 300, 2000, 17, &workers).unwrap();
        let sol = mfcp_minimize(&model, &out.reference_value, 0.0, &tilted, 1200).unwrap();
        let cands: Vec<&Trajectory<f64>> = sol.minimizers.iter().map(|(t, _)| t).collect();
        let stat = trajectory_distance(&ens, &cands).unwrap();
        println!("tilted eps=0.1: {} minimizers, mean sup-dist {:.4}", cands.len(), stat.mean_distance);
    }
    println!("total {:.0}s", t_start.elapsed().as_secs_f64());
}
