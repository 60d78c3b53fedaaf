use mfg_core::inviscid::mfg_fixed_point;
use mfg_core::model::ModelSpec;
use mfg_core::simplex::SimplexPoint;
use mfg_core::Workers;

fn main() {
    let workers = Workers::new(8);
    let p0 = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
    for t in [3.0f64, 1.0] {
        let model = ModelSpec::<f64>::builtin_d2(t);
        let out = mfg_fixed_point(&model, &p0, 600, 20, 2024, &workers).unwrap();
        println!(
            "T={t}: {} equilibria, attempted {}, converged {}",
            out.equilibria.len(),
            out.starts_attempted,
            out.starts_converged
        );
        for (e, r) in out.equilibria.iter().zip(&out.residuals) {
            println!("  terminal mean {:+.6} residual {:.2e}", e.mean_path().last().unwrap(), r);
        }
    }
}
