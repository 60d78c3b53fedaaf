use mfg_core::inviscid::{hjb_solve, mfcp_minimize, Trajectory};
use mfg_core::model::{ModelSpec, NoiseConfig};
use mfg_core::selection::{contracted_correction, trajectory_distance};
use mfg_core::simplex::{SimplexGrid, SimplexPoint};
use mfg_core::viscous::{simulate, solve_viscous_fields, FieldFeedback};
use mfg_core::Workers;

fn main() {
    let model = ModelSpec::<f64>::builtin_d2(3.0);
    let workers = Workers::new(8);
    let tilted = SimplexPoint::new(vec![0.75, 0.25]).unwrap();
    let grid_ref = SimplexGrid::<f64>::new(2, 100).unwrap();
    let dt_ref = grid_ref.h() / (2.0 * 2.0 * model.cap());
    let reference = hjb_solve(&model, grid_ref, dt_ref).unwrap();
    let sol = mfcp_minimize(&model, &reference, 0.0, &tilted, 1200).unwrap();
    let cands: Vec<&Trajectory<f64>> = sol.minimizers.iter().map(|(t, _)| t).collect();

    let scan: Vec<(f64, f64)> = vec![(0.05, 1.0), (0.05, 0.5), (0.045, 1.0), (0.06, 1.0)];
    for (kappa0, kappa2) in scan {
        let mut xis = Vec::new();
        let mut dist01 = f64::NAN;
        for &eps in &[0.3f64, 0.2, 0.1] {
            let delta: f64 = eps.min(0.5);
            let cfg = match NoiseConfig::new(eps, delta / 4.0, delta, kappa0, kappa2) {
                Ok(c) => c,
                Err(e) => { println!("k0={kappa0} k2={kappa2} eps={eps}: invalid ({e})"); continue; }
            };
            let grid = SimplexGrid::<f64>::new(2, 60).unwrap();
            let fields = solve_viscous_fields(&model, &cfg, grid, 200).unwrap();
            let fb = FieldFeedback { gradient: &fields.gradient, cap: model.cap() };
            let dt_sim = (0.02 / cfg.kappa_eps()).min(1e-3);
            let centre = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
            let ens = simulate(&fb, &cfg, 0.0, 3.0, &centre, None, dt_sim, 200, 1500, 7, &workers).unwrap();
            let xi_field = contracted_correction(&fields.correction);
            let mut acc_abs = 0.0;
            for path in 0..ens.n_paths {
                let mut integ = 0.0;
                for k in 0..ens.times.len() - 1 {
                    let dt = ens.times[k + 1] - ens.times[k];
                    let p0 = SimplexPoint::new(ens.state(path, k).to_vec()).unwrap();
                    let p1 = SimplexPoint::new(ens.state(path, k + 1).to_vec()).unwrap();
                    let v0 = xi_field.interpolate(ens.times[k], &p0.to_chart()).unwrap().0[0];
                    let v1 = xi_field.interpolate(ens.times[k + 1], &p1.to_chart()).unwrap().0[0];
                    integ += dt * 0.5 * (v0 + v1);
                }
                acc_abs += integ.abs();
            }
            xis.push(acc_abs / ens.n_paths as f64);
            if eps == 0.1 {
                let ens_t = simulate(&fb, &cfg, 0.0, 3.0, &tilted, None, dt_sim, 200, 1500, 17, &workers).unwrap();
                dist01 = trajectory_distance(&ens_t, &cands).unwrap().mean_distance;
            }
        }
        println!("k0={kappa0} k2={kappa2}: xi={xis:?} dist01={dist01:.4}");
    }
}
