//! Subcommand implementations. Every run validates first, then computes,
//! then writes its outputs plus `run.json` into the output directory, so a
//! failing configuration leaves nothing behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mfg_core::csvio;
use mfg_core::error::{Error, Result};
use mfg_core::inviscid::{hjb_solve, mfcp_minimize, mfg_fixed_point};
use mfg_core::masterweak::{certify, entropy_solve, selected_trajectory, ConsLaw2, TestBattery};
use mfg_core::selection::{run_sweep, value_selection_check};
use mfg_core::simplex::SimplexGrid;
use mfg_core::viscous::{
    cfl_step, cost_mc, master_equation_residual, simulate, solve_viscous_fields, FieldFeedback,
};
use mfg_core::Workers;

use crate::config::Experiment;

pub struct RunContext {
    pub exp: Experiment,
    pub out_dir: PathBuf,
    pub workers: Workers,
    pub command: String,
}

impl RunContext {
    fn finish(&self, started: Instant, extra: serde_json::Value) -> Result<()> {
        let mut config = serde_json::Map::new();
        for (section, keys) in &self.exp.resolved.0 {
            let mut sec = serde_json::Map::new();
            for (k, v) in keys {
                sec.insert(k.clone(), serde_json::Value::String(v.clone()));
            }
            config.insert(section.clone(), serde_json::Value::Object(sec));
        }
        let doc = serde_json::json!({
            "command": self.command,
            "config": config,
            "seed": self.exp.seed,
            "threads": self.workers.threads(),
            "version": env!("CARGO_PKG_VERSION"),
            "wall_seconds": started.elapsed().as_secs_f64(),
            "results": extra,
        });
        std::fs::write(
            self.out_dir.join("run.json"),
            serde_json::to_string_pretty(&doc).expect("json"),
        )?;
        Ok(())
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }
}

/// Noise-free planner value on the lattice.
pub fn cmd_hjb(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let grid = SimplexGrid::<f64>::new(exp.model.d, exp.grid_n)?;
    let bound = grid.h() / (exp.model.d as f64 * exp.model.cap() * 2.0);
    if exp.grid_dt > bound {
        return Err(Error::Cfl(format!(
            "grid.dt = {} exceeds h/(2 d M) = {bound}",
            exp.grid_dt
        )));
    }
    let value = hjb_solve(&exp.model, grid, exp.grid_dt)?;
    ctx.ensure_out()?;
    csvio::write_grid_field(&ctx.out_dir.join("value.csv"), &value.value)?;
    csvio::write_grid_field(&ctx.out_dir.join("gradient.csv"), &value.gradient_field(1))?;
    ctx.finish(
        started,
        serde_json::json!({ "clamp_mass": value.clamp_mass }),
    )
}

/// Planner minimisers from the start point.
pub fn cmd_mfcp(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let grid = SimplexGrid::<f64>::new(exp.model.d, exp.grid_n)?;
    let bound = grid.h() / (exp.model.d as f64 * exp.model.cap() * 2.0);
    if exp.grid_dt > bound {
        return Err(Error::Cfl(format!("grid.dt exceeds h/(2 d M) = {bound}")));
    }
    let value = hjb_solve(&exp.model, grid, exp.grid_dt)?;
    let sol = mfcp_minimize(&exp.model, &value, 0.0, &exp.p0, 2 * exp.store)?;
    ctx.ensure_out()?;
    let mut costs = Vec::new();
    for (i, (traj, cost)) in sol.minimizers.iter().enumerate() {
        csvio::write_trajectory(&ctx.out_dir.join(format!("minimizer_{i}.csv")), traj)?;
        costs.push(*cost);
    }
    ctx.finish(
        started,
        serde_json::json!({
            "differentiable_at_start": sol.differentiable,
            "value_at_start": sol.value_at_start,
            "costs": costs,
        }),
    )
}

/// Multistart equilibrium search.
pub fn cmd_mfg(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let out = mfg_fixed_point(&exp.model, &exp.p0, 2 * exp.store, 20, exp.seed, &ctx.workers)?;
    ctx.ensure_out()?;
    for (i, eq) in out.equilibria.iter().enumerate() {
        csvio::write_trajectory(&ctx.out_dir.join(format!("equilibrium_{i}.csv")), eq)?;
    }
    ctx.finish(
        started,
        serde_json::json!({
            "equilibria": out.equilibria.len(),
            "starts_attempted": out.starts_attempted,
            "starts_converged": out.starts_converged,
            "residuals": out.residuals,
        }),
    )
}

/// Viscous bundle at a single intensity.
pub fn cmd_viscous(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let eps = exp.single_eps;
    let ncfg = exp.schedule.noise_config(eps)?;
    let grid = SimplexGrid::<f64>::new(exp.model.d, exp.grid_n)?;
    let bound = cfl_step(&exp.model, &ncfg, grid.h());
    if exp.grid_dt > bound {
        return Err(Error::Cfl(format!(
            "grid.dt = {} exceeds the viscous stability bound {bound}",
            exp.grid_dt
        )));
    }
    let fields = solve_viscous_fields(&exp.model, &ncfg, grid, exp.store)?;
    let residual = master_equation_residual(&fields, &exp.model, &ncfg);
    ctx.ensure_out()?;
    csvio::write_grid_field(&ctx.out_dir.join("value.csv"), &fields.value)?;
    csvio::write_grid_field(&ctx.out_dir.join("gradient.csv"), &fields.gradient)?;
    csvio::write_grid_field(&ctx.out_dir.join("mean_value.csv"), &fields.mean_value)?;
    csvio::write_grid_field(&ctx.out_dir.join("correction.csv"), &fields.correction)?;
    csvio::write_grid_field(&ctx.out_dir.join("state_value.csv"), &fields.state_value)?;
    // equilibrium ensemble and its cost check
    let feedback = FieldFeedback { gradient: &fields.gradient, cap: exp.model.cap() };
    let ensemble = simulate(
        &feedback,
        &ncfg,
        0.0,
        exp.model.horizon,
        &exp.p0,
        Some(&exp.p0),
        exp.dt_sde,
        exp.store.min(300),
        exp.n_paths,
        exp.seed,
        &ctx.workers,
    )?;
    if exp.write_ensembles {
        csvio::write_ensemble(&ctx.out_dir.join("ensemble.csv"), &ensemble)?;
    }
    let mc = cost_mc(&ensemble, &exp.model, &feedback, Some(&fields.correction))?;
    let grid_value = fields
        .value
        .interpolate(0.0, &exp.p0.to_chart())?
        .0[0];
    ctx.finish(
        started,
        serde_json::json!({
            "eps": eps,
            "dt_internal": fields.dt_internal,
            "schwarz_residual": fields.schwarz_residual,
            "master_equation_residual": residual,
            "mc_planner_cost": mc.planner.0,
            "mc_planner_se": mc.planner.1,
            "grid_value_at_start": grid_value,
            "xi": mc.xi.map(|x| x.0),
            "boundary_hit_rate": ensemble.boundary_hit_rate(),
            "clip_mass": ensemble.total_clip_mass(),
        }),
    )
}

/// Vanishing-viscosity sweep with the convergence report and a plot script.
pub fn cmd_sweep(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let out = run_sweep(&exp.model, &exp.p0, &exp.schedule, &exp.sweep_config(), &ctx.workers)?;
    ctx.ensure_out()?;
    csvio::write_sweep_rows(&ctx.out_dir.join("report.csv"), &out.rows)?;
    for (i, (traj, _)) in out.minimizers.iter().enumerate() {
        csvio::write_trajectory(&ctx.out_dir.join(format!("minimizer_{i}.csv")), traj)?;
    }
    if exp.write_ensembles {
        for (row, ens) in out.rows.iter().zip(&out.ensembles) {
            if let Some(ens) = ens {
                csvio::write_ensemble(
                    &ctx.out_dir.join(format!("ensemble_eps_{}.csv", row.eps)),
                    ens,
                )?;
            }
        }
    }
    let mut identity = Vec::new();
    for (row, bundle) in out.rows.iter().zip(&out.bundles) {
        if let Some(b) = bundle {
            identity.push(serde_json::json!({
                "eps": row.eps,
                "selection_identity_l1":
                    value_selection_check(&b.state_value, &out.reference_points),
            }));
        }
    }
    write_plot_script(&ctx.out_dir)?;
    ctx.finish(
        started,
        serde_json::json!({
            "rows": out.rows.len(),
            "reference_points": out.reference_points.len(),
            "minimizers": out.minimizers.len(),
            "selection_identity": identity,
        }),
    )
}

/// Two-state conservation-law benchmark.
pub fn cmd_conslaw(ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let law = ConsLaw2::reduce(&exp.model)?;
    let field = entropy_solve(&law, exp.dm, exp.grid_dt)?;
    ctx.ensure_out()?;
    csvio::write_line_field(&ctx.out_dir.join("gap.csv"), &field)?;
    // chart-oriented copy, directly consumable by `certify`
    let chart = field.to_chart_field(field.centers.len())?;
    csvio::write_grid_field(&ctx.out_dir.join("gap_chart.csv"), &chart)?;
    let m0 = 2.0 * exp.p0.get(0) - 1.0;
    let paths = selected_trajectory(&field, m0, 2 * exp.store);
    for (i, path) in paths.iter().enumerate() {
        let name = ctx.out_dir.join(format!("selected_{i}.csv"));
        let mut text = String::from("t,m\n");
        let dt = exp.model.horizon / (path.len() - 1) as f64;
        for (k, m) in path.iter().enumerate() {
            text.push_str(&format!("{},{}\n", dt * k as f64, m));
        }
        std::fs::write(name, text)?;
    }
    ctx.finish(
        started,
        serde_json::json!({
            "cells": field.centers.len(),
            "inflow_violations": field.inflow_violations,
            "branches": paths.len(),
        }),
    )
}

/// Certification of a candidate chart field read from CSV.
pub fn cmd_certify(ctx: &RunContext, field_path: &Path) -> Result<()> {
    let started = Instant::now();
    let exp = &ctx.exp;
    let field = csvio::read_grid_field(field_path)?;
    if field.grid.states() != exp.model.d {
        return Err(Error::InvalidConfig(format!(
            "field has {} states, model has {}",
            field.grid.states(),
            exp.model.d
        )));
    }
    let battery = TestBattery::standard(&field.grid, exp.model.horizon)?;
    let cert = certify(&field, &exp.model, &battery)?;
    ctx.ensure_out()?;
    let mut report = String::new();
    for clause in &cert.clauses {
        report.push_str(&format!(
            "{}: residual {:.6e} threshold {:.6e} -> {}\n",
            clause.name,
            clause.residual,
            clause.threshold,
            if clause.passed { "pass" } else { "FAIL" }
        ));
    }
    report.push_str(&format!(
        "admissible (discrete at this mesh): {}\n",
        cert.admissible
    ));
    print!("{report}");
    std::fs::write(ctx.out_dir.join("certification.txt"), &report)?;
    ctx.finish(
        started,
        serde_json::json!({
            "admissible": cert.admissible,
            "clauses": cert.clauses.iter().map(|c| serde_json::json!({
                "name": c.name, "residual": c.residual,
                "threshold": c.threshold, "passed": c.passed,
            })).collect::<Vec<_>>(),
        }),
    )
}

fn write_plot_script(dir: &Path) -> Result<()> {
    let script = r#"# gnuplot script for the sweep report
set datafile separator ','
set key autotitle columnhead
set logscale x
set xlabel 'noise intensity eps'
set terminal pngcairo size 900,600

set output 'gaps.png'
set ylabel 'gap to the noise-free reference'
plot 'report.csv' using 1:5 with linespoints title 'sup gap of the value', \
     'report.csv' using 1:6 with linespoints title 'L1 gap of the gradient', \
     'report.csv' using 1:7 with linespoints title 'L1 gap of the per-state values'

set output 'correction.png'
set ylabel 'correction-cost contribution'
plot 'report.csv' using 1:8 with linespoints title 'Xi'

set output 'selection.png'
set ylabel 'trajectory distance / weights'
plot 'report.csv' using 1:9 with linespoints title 'mean distance to the minimiser set', \
     'report.csv' using 1:10 with linespoints title 'weight 1'
"#;
    std::fs::write(dir.join("plots.gp"), script)?;
    Ok(())
}
