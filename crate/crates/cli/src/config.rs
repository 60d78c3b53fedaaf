//! Flat sectioned `key = value` experiment configuration.
//!
//! Sections and keys are listed exhaustively in the README; unknown sections
//! or keys are rejected so misspellings never fall back to silent defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use mfg_core::error::{Error, Result};
use mfg_core::model::{ModelSpec, PotentialFn, StateFn};
use mfg_core::selection::{SelectionSchedule, SweepConfig};
use mfg_core::simplex::SimplexPoint;

#[derive(Clone, Debug, Default)]
pub struct Sections(pub BTreeMap<String, BTreeMap<String, String>>);

const KNOWN: &[(&str, &[&str])] = &[
    (
        "model",
        &["builtin", "d", "T", "f", "g", "F", "G", "M", "p0"],
    ),
    ("grid", &["n", "dt", "dm", "store"]),
    ("mc", &["n_paths", "dt_sde", "seed"]),
    (
        "schedule",
        &["eps_list", "eps", "a", "kappa0", "kappa2", "margin"],
    ),
    ("output", &["dir", "write_ensembles"]),
];

pub fn parse_file(path: &Path) -> Result<Sections> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<Sections> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !KNOWN.iter().any(|(s, _)| *s == name) {
                return Err(Error::InvalidConfig(format!(
                    "unknown section `[{name}]` at line {}",
                    lineno + 1
                )));
            }
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("expected `key = value` at line {}", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let section = current.clone().ok_or_else(|| {
            Error::InvalidConfig(format!("key `{key}` outside any section (line {})", lineno + 1))
        })?;
        let allowed = KNOWN.iter().find(|(s, _)| *s == section).unwrap().1;
        if !allowed.contains(&key.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "unknown key `{key}` in section `[{section}]` (line {})",
                lineno + 1
            )));
        }
        let prev = sections
            .get_mut(&section)
            .unwrap()
            .insert(key.clone(), value.trim().to_string());
        if prev.is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate key `{key}` in `[{section}]`"
            )));
        }
    }
    Ok(Sections(sections))
}

impl Sections {
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.0.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("cannot parse `{section}.{key} = {v}`"))
            }),
        }
    }

    pub fn float(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse::<f64>(section, key)?.unwrap_or(default))
    }

    pub fn integer(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse::<usize>(section, key)?.unwrap_or(default))
    }

    pub fn float_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => {
                let parsed: Result<Vec<f64>> = v
                    .split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|_| {
                            Error::InvalidConfig(format!("bad number `{x}` in `{section}.{key}`"))
                        })
                    })
                    .collect();
                Ok(Some(parsed?))
            }
        }
    }
}

/// Quadratic scalar potential `sum_i c_i p_i^2 + sum_i b_i p_i`.
fn quadratic_potential(spec: &str, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut parts = spec.splitn(2, ';');
    let parse_vec = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad coefficient `{x}`")))
            })
            .collect()
    };
    let quad = parse_vec(parts.next().unwrap())?;
    let lin = match parts.next() {
        Some(s) => parse_vec(s)?,
        None => vec![0.0; d],
    };
    if quad.len() != d || lin.len() != d {
        return Err(Error::InvalidConfig(format!(
            "quadratic potential needs {d} coefficients per part"
        )));
    }
    Ok((quad, lin))
}

fn potential_from_spec(spec: &str, d: usize) -> Result<(PotentialFn<f64>, StateFn<f64>)> {
    if spec == "zero" {
        let pot: PotentialFn<f64> = Arc::new(|_| 0.0);
        let cost: StateFn<f64> = Arc::new(move |_| vec![0.0; d]);
        return Ok((pot, cost));
    }
    if let Some(rest) = spec.strip_prefix("quadratic:") {
        let (quad, lin) = quadratic_potential(rest, d)?;
        let (q2, l2) = (quad.clone(), lin.clone());
        let pot: PotentialFn<f64> = Arc::new(move |p: &SimplexPoint<f64>| {
            p.coords()
                .iter()
                .zip(&quad)
                .zip(&lin)
                .map(|((&x, &c), &b)| c * x * x + b * x)
                .sum()
        });
        // centred cost: the intrinsic gradient of the potential, in closed form
        let cost: StateFn<f64> = Arc::new(move |p: &SimplexPoint<f64>| {
            let raw: Vec<f64> = p
                .coords()
                .iter()
                .zip(&q2)
                .zip(&l2)
                .map(|((&x, &c), &b)| 2.0 * c * x + b)
                .collect();
            let mean = raw.iter().sum::<f64>() / d as f64;
            raw.into_iter().map(|v| v - mean).collect()
        });
        return Ok((pot, cost));
    }
    if let Some(path) = spec.strip_prefix("table:") {
        let field = mfg_core::csvio::read_grid_field(Path::new(path))?;
        if field.grid.states() != d || field.width != 1 {
            return Err(Error::InvalidConfig(format!(
                "table `{path}` must be a width-1 field over {d} states"
            )));
        }
        let grad = field.gradient_field(0, 1);
        let f2 = field.clone();
        let pot: PotentialFn<f64> = Arc::new(move |p: &SimplexPoint<f64>| {
            f2.interpolate(f2.times[0], &p.to_chart()).map(|(v, _)| v[0]).unwrap_or(0.0)
        });
        let cost: StateFn<f64> = Arc::new(move |p: &SimplexPoint<f64>| {
            grad.interpolate(grad.times[0], &p.to_chart())
                .map(|(v, _)| v)
                .unwrap_or_else(|_| vec![0.0; d])
        });
        return Ok((pot, cost));
    }
    Err(Error::InvalidConfig(format!("unrecognised cost spec `{spec}`")))
}

/// Fully resolved experiment setup.
pub struct Experiment {
    pub model: ModelSpec<f64>,
    pub p0: SimplexPoint<f64>,
    pub grid_n: usize,
    pub grid_dt: f64,
    pub dm: f64,
    pub store: usize,
    pub n_paths: usize,
    pub dt_sde: f64,
    pub seed: u64,
    pub schedule: SelectionSchedule<f64>,
    pub single_eps: f64,
    pub margin: f64,
    pub write_ensembles: bool,
    pub resolved: Sections,
}

pub fn resolve(sections: Sections, seed_override: Option<u64>) -> Result<Experiment> {
    let horizon = sections.float("model", "T", 3.0)?;
    if horizon <= 0.0 {
        return Err(Error::InvalidConfig("T must be positive".into()));
    }
    let model = match sections.get("model", "builtin") {
        Some("d2_paper") => ModelSpec::<f64>::builtin_d2(horizon),
        Some(other) => {
            return Err(Error::InvalidConfig(format!("unknown builtin `{other}`")));
        }
        None => {
            let d = sections.integer("model", "d", 0)?;
            if d < 2 {
                return Err(Error::InvalidConfig(
                    "custom models need `d >= 2` (or use `builtin = d2_paper`)".into(),
                ));
            }
            let f_spec = sections.get("model", "F").unwrap_or("zero");
            let g_spec = sections.get("model", "G").ok_or_else(|| {
                Error::InvalidConfig("custom models need a terminal potential `G`".into())
            })?;
            let (f_pot, f_cost) = potential_from_spec(f_spec, d)?;
            let (g_pot, g_cost) = potential_from_spec(g_spec, d)?;
            if sections.get("model", "f").is_some() || sections.get("model", "g").is_some() {
                return Err(Error::InvalidConfig(
                    "per-state `f`/`g` are derived from the potentials; set `F`/`G` instead"
                        .into(),
                ));
            }
            let cap = sections.parse::<f64>("model", "M")?;
            ModelSpec::new(d, horizon, f_cost, g_cost, Some(f_pot), Some(g_pot), cap, "custom")?
        }
    };
    let p0 = match sections.float_list("model", "p0")? {
        Some(coords) => SimplexPoint::new(coords)?,
        None => SimplexPoint::uniform(model.d),
    };
    if p0.dim() != model.d {
        return Err(Error::InvalidConfig("p0 dimension does not match the model".into()));
    }

    let grid_n = sections.integer("grid", "n", 100)?;
    let grid_dt = sections.float("grid", "dt", 1e-3)?;
    let dm = sections.float("grid", "dm", 0.01)?;
    let store = sections.integer("grid", "store", 300)?;
    if grid_n == 0 || grid_dt <= 0.0 || dm <= 0.0 || store < 2 {
        return Err(Error::InvalidConfig("grid parameters must be positive".into()));
    }

    let n_paths = sections.integer("mc", "n_paths", 2000)?;
    let dt_sde = sections.float("mc", "dt_sde", 2e-5)?;
    let seed = seed_override.unwrap_or(sections.integer("mc", "seed", 7)? as u64);

    let eps_list = sections
        .float_list("schedule", "eps_list")?
        .unwrap_or_else(|| vec![0.3, 0.2, 0.1]);
    let kappa2 = match sections.get("schedule", "kappa2") {
        None | Some("auto") => 0.5 * model.cap(),
        Some(v) => v
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("bad kappa2 `{v}`")))?,
    };
    let mut schedule = SelectionSchedule::standard(&model, eps_list)?;
    schedule.a = sections.float("schedule", "a", 1.0)?;
    schedule.kappa0 = sections.float("schedule", "kappa0", 0.045)?;
    schedule.kappa2 = kappa2;
    schedule.validate()?;
    let single_eps = sections.float("schedule", "eps", schedule.eps_list[0])?;
    let margin = sections.float("schedule", "margin", 0.2)?;

    let write_ensembles = matches!(sections.get("output", "write_ensembles"), Some("true"));

    Ok(Experiment {
        model,
        p0,
        grid_n,
        grid_dt,
        dm,
        store,
        n_paths,
        dt_sde,
        seed,
        schedule,
        single_eps,
        margin,
        write_ensembles,
        resolved: sections,
    })
}

impl Experiment {
    pub fn sweep_config(&self) -> SweepConfig<f64> {
        SweepConfig {
            subdivisions: self.grid_n,
            store_steps: self.store,
            margin: self.margin,
            n_paths: self.n_paths,
            dt_sim: self.dt_sde,
            seed: self.seed,
            reference_slices: 7,
        }
    }
}
