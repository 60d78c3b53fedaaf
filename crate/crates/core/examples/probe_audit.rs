use mfg_core::model::{truncated_hamiltonian, a_star, ModelSpec, NoiseConfig};
use mfg_core::simplex::{GridField, SimplexGrid};
use mfg_core::viscous::{master_equation_residual, solve_viscous_fields, ViscousFields};

/// Residual of the scalar planner equation at interior nodes/slices.
fn value_residual(fields: &ViscousFields<f64>, model: &ModelSpec<f64>, cfg: &NoiseConfig<f64>) -> f64 {
    let v = &fields.value;
    let grid = &v.grid;
    let d = grid.states();
    let m = grid.chart_dim();
    let h = grid.h();
    let phi = cfg.cutoff();
    let nt = v.times.len();
    let dt = v.times[1] - v.times[0];
    let eps2 = cfg.eps * cfg.eps;
    let mut worst: f64 = 0.0;
    for t in 1..nt - 1 {
        for node in 0..grid.len() {
            if !grid.is_interior(node) {
                continue;
            }
            let p = grid.point(node);
            let pc = p.coords();
            let w = v.intrinsic_gradient_at(t, node, 0, 1);
            let dvdt = (v.at(t + 1, node, 0) - v.at(t - 1, node, 0)) / (2.0 * dt);
            let mut ham = model.running_potential(&p);
            for i in 0..d {
                ham += pc[i] * truncated_hamiltonian(i, &w, model.cap());
                for j in 0..d {
                    if i != j {
                        ham += pc[i] * phi.value(pc[j]) * (w[j] - w[i]);
                    }
                }
            }
            let mut kim = 0.0;
            let slack = 1.0 - pc[..m].iter().sum::<f64>();
            for a in 0..m {
                let up = grid.neighbor(node, a, 1).unwrap();
                let dn = grid.neighbor(node, a, -1).unwrap();
                kim += pc[a] * slack * (v.at(t, up, 0) - 2.0 * v.at(t, node, 0) + v.at(t, dn, 0)) / (h * h);
            }
            for a in 0..m {
                for b in (a + 1)..m {
                    let mut delta = vec![0i32; m];
                    delta[a] = 1;
                    delta[b] = -1;
                    if let (Some(up), Some(dn)) = (grid.shifted(node, &delta), {
                        delta[a] = -1;
                        delta[b] = 1;
                        grid.shifted(node, &delta)
                    }) {
                        kim += pc[a] * pc[b]
                            * (v.at(t, up, 0) - 2.0 * v.at(t, node, 0) + v.at(t, dn, 0)) / (h * h);
                    }
                }
            }
            kim *= 0.5 * eps2;
            worst = worst.max((dvdt + ham + kim).abs());
        }
    }
    worst
}

/// Residual of the mean-value equation at interior nodes/slices.
fn mean_residual(fields: &ViscousFields<f64>, model: &ModelSpec<f64>, cfg: &NoiseConfig<f64>) -> f64 {
    let y = &fields.mean_value;
    let vgrad = &fields.gradient;
    let grid = &y.grid;
    let d = grid.states();
    let m = grid.chart_dim();
    let h = grid.h();
    let phi = cfg.cutoff();
    let nt = y.times.len();
    let dt = y.times[1] - y.times[0];
    let eps2 = cfg.eps * cfg.eps;
    let mut worst: f64 = 0.0;
    for t in 1..nt - 1 {
        for node in 0..grid.len() {
            if !grid.is_interior(node) {
                continue;
            }
            let p = grid.point(node);
            let pc = p.coords();
            let vv: Vec<f64> = (0..d).map(|c| vgrad.at(t, node, c)).collect();
            let dy = y.intrinsic_gradient_at(t, node, 0, 1);
            let dydt = (y.at(t + 1, node, 0) - y.at(t - 1, node, 0)) / (2.0 * dt);
            let mut transport = 0.0;
            let mut source = 0.0;
            let f = model.running_cost(&p);
            for j in 0..d {
                source += pc[j] * f[j];
                for k in 0..d {
                    let rate = phi.value(pc[k]) + a_star(vv[j] - vv[k], model.cap());
                    transport += pc[j] * rate * (dy[k] - dy[j]);
                    let a = a_star(vv[j] - vv[k], model.cap());
                    source += 0.5 * pc[j] * a * a;
                    source += pc[j] * pc[k] * phi.slope(pc[j]) * (vv[j] - vv[k]);
                }
            }
            let mut kim = 0.0;
            let slack = 1.0 - pc[..m].iter().sum::<f64>();
            for a in 0..m {
                let up = grid.neighbor(node, a, 1).unwrap();
                let dn = grid.neighbor(node, a, -1).unwrap();
                kim += pc[a] * slack * (y.at(t, up, 0) - 2.0 * y.at(t, node, 0) + y.at(t, dn, 0)) / (h * h);
            }
            for a in 0..m {
                for b in (a + 1)..m {
                    let mut delta = vec![0i32; m];
                    delta[a] = 1;
                    delta[b] = -1;
                    if let (Some(up), Some(dn)) = (grid.shifted(node, &delta), {
                        delta[a] = -1;
                        delta[b] = 1;
                        grid.shifted(node, &delta)
                    }) {
                        kim += pc[a] * pc[b]
                            * (y.at(t, up, 0) - 2.0 * y.at(t, node, 0) + y.at(t, dn, 0)) / (h * h);
                    }
                }
            }
            kim *= 0.5 * eps2;
            worst = worst.max((dydt + transport + source + kim).abs());
        }
    }
    worst
}

fn main() {
    let model = ModelSpec::<f64>::builtin_d2(3.0);
    let cfg = NoiseConfig::without_repulsion(0.3);
    for (n, store) in [(50usize, 300usize), (100, 600)] {
        let grid = SimplexGrid::<f64>::new(2, n).unwrap();
        let fields = solve_viscous_fields(&model, &cfg, grid, store).unwrap();
        let rv = value_residual(&fields, &model, &cfg);
        let ry = mean_residual(&fields, &model, &cfg);
        let ru = master_equation_residual(&fields, &model, &cfg);
        let dt = fields.value.times[1] - fields.value.times[0];
        println!("n={n} store={store} (h={:.3}, dt_out={dt:.4}): value={rv:.5} mean={ry:.5} master={ru:.5}", 1.0 / n as f64);
    }
    let _ = GridField::<f64>::time_mesh(0.0, 1.0, 2);
}
