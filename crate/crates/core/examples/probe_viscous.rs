use mfg_core::inviscid::hjb_solve;
use mfg_core::model::{ModelSpec, NoiseConfig};
use mfg_core::simplex::SimplexGrid;
use mfg_core::viscous::{master_equation_residual, solve_viscous_fields};

fn main() {
    let horizon = 3.0;
    let model = ModelSpec::<f64>::builtin_d2(horizon);
    let kappa0 = 0.5;
    let kappa2 = 5.0 * model.cap();

    let grid_ref = SimplexGrid::<f64>::new(2, 100).unwrap();
    let dt_ref = grid_ref.h() / (2.0 * 2.0 * model.cap());
    let inviscid = hjb_solve(&model, grid_ref.clone(), dt_ref).unwrap();

    let args: Vec<String> = std::env::args().collect();
    let eps_list: Vec<f64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().unwrap()).collect()
    } else {
        vec![0.3, 0.2]
    };
    for eps in eps_list {
        let delta: f64 = eps.min(0.5);
        let theta = delta / 4.0;
        let cfg = NoiseConfig::new(eps, theta, delta, kappa0, kappa2).unwrap();
        let grid = SimplexGrid::<f64>::new(2, 100).unwrap();
        let t0 = std::time::Instant::now();
        let fields = solve_viscous_fields(&model, &cfg, grid.clone(), 300).unwrap();
        let solve_s = t0.elapsed().as_secs_f64();
        let mut sup_gap: f64 = 0.0;
        for t_idx in 0..fields.value.times.len() {
            let t = fields.value.times[t_idx];
            for node in 0..grid.len() {
                let x = grid.chart(node);
                let m = 2.0 * x.coords()[0] - 1.0;
                if m.abs() <= 0.6 {
                    let v_ref = inviscid.value.interpolate(t, &x).unwrap().0[0];
                    sup_gap = sup_gap.max((fields.value.at(t_idx, node, 0) - v_ref).abs());
                }
            }
        }
        let resid = master_equation_residual(&fields, &model, &cfg);
        println!(
            "eps={eps:.2} delta={delta:.3}: solve {solve_s:.1}s sup_gap(K0.2)={sup_gap:.4} resid={resid:.3}"
        );
    }
    // control: no repulsion at all
    let cfg = NoiseConfig::without_repulsion(0.3);
    let grid = SimplexGrid::<f64>::new(2, 100).unwrap();
    let fields = solve_viscous_fields(&model, &cfg, grid.clone(), 300).unwrap();
    let resid = master_equation_residual(&fields, &model, &cfg);
    let grid2 = SimplexGrid::<f64>::new(2, 50).unwrap();
    let fields2 = solve_viscous_fields(&model, &cfg, grid2, 150).unwrap();
    let resid2 = master_equation_residual(&fields2, &model, &cfg);
    println!("phi=0 eps=0.3: resid(n=100)={resid:.4} resid(n=50)={resid2:.4}");
}
