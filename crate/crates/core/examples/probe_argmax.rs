use mfg_core::model::{ModelSpec, NoiseConfig};
use mfg_core::simplex::SimplexGrid;
use mfg_core::viscous::{master_equation_residual_field, solve_viscous_fields};

fn main() {
    let model = ModelSpec::<f64>::builtin_d2(3.0);
    for eps in [0.3f64, 0.15] {
        let cfg = NoiseConfig::without_repulsion(eps);
        let grid = SimplexGrid::<f64>::new(2, 100).unwrap();
        let fields = solve_viscous_fields(&model, &cfg, grid.clone(), 600).unwrap();
        let r = master_equation_residual_field(&fields, &model, &cfg);
        let mut best = (0usize, 0usize, 0usize, 0.0f64);
        let mut max_bulk: f64 = 0.0; // |m| in [0.1, 0.9]
        let mut max_shock: f64 = 0.0; // |m| < 0.1
        let mut max_edge: f64 = 0.0; // |m| > 0.9
        for t in 0..r.times.len() {
            for node in 0..grid.len() {
                let m = 2.0 * grid.chart(node).coords()[0] - 1.0;
                for c in 0..2 {
                    let v = r.at(t, node, c).abs();
                    if v > best.3 {
                        best = (t, node, c, v);
                    }
                    if m.abs() < 0.1 {
                        max_shock = max_shock.max(v);
                    } else if m.abs() > 0.9 {
                        max_edge = max_edge.max(v);
                    } else {
                        max_bulk = max_bulk.max(v);
                    }
                }
            }
        }
        println!(
            "eps={eps}: max={:.4} at t={:.3} m={:+.2} c={} | shock_band={:.4} bulk={:.4} edge_band={:.4}",
            best.3,
            r.times[best.0],
            2.0 * grid.chart(best.1).coords()[0] - 1.0,
            best.2,
            max_shock,
            max_bulk,
            max_edge
        );
    }
}
