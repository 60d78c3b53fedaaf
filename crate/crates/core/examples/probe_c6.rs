use mfg_core::model::{ModelSpec, NoiseConfig};
use mfg_core::simplex::SimplexGrid;
use mfg_core::viscous::{master_equation_residual, solve_viscous_fields};

fn main() {
    let model = ModelSpec::<f64>::builtin_d2(3.0);
    let cfg = NoiseConfig::without_repulsion(0.4);
    for (n, store) in [(100usize, 600usize), (200, 1200)] {
        let grid = SimplexGrid::<f64>::new(2, n).unwrap();
        let fields = solve_viscous_fields(&model, &cfg, grid.clone(), store).unwrap();
        let resid = master_equation_residual(&fields, &model, &cfg);
        let h = grid.h();
        let dt = fields.value.times[1] - fields.value.times[0];
        println!("phi=0 eps=0.4 n={n} store={store}: resid={resid:.5} C={:.3}", resid / (h + dt));
    }
}
