//! Two-state conservation-law benchmark and the weak-solution certification
//! battery.
//!
//! The benchmark solves, in the mean coordinate `m = 2 p_1 - 1`, the
//! conservative equation for the inter-state value gap with flux
//! `m Z |Z| / 2 - Z^2 / 2` (reversed time, local Lax-Friedrichs flux), and
//! integrates the selected trajectory `dm/dt = Z - m |Z|` through the
//! solved field.
//!
//! Certification operates on chart-oriented gradient fields (the unknown of
//! the conservative master system, `D_x` of the chart value): a weak
//! residual against a battery of compactly supported bumps, a curl test for
//! the existence of a potential (chart dimension at least two), a one-sided
//! slope / weak-semiconcavity bound, and a mollified terminal-slice check.
//! In this orientation entropy shocks jump downward. The mean-coordinate
//! field of the two-state benchmark is the negative of the chart field;
//! [`LineField::to_chart_field`] performs the conversion.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{chart_hamiltonian, ModelSpec};
use crate::scalar::Real;
use crate::simplex::{ChartPoint, GridField, SimplexGrid};

/// Pinned certification thresholds (mesh-scaled where appropriate).
pub mod thresholds {
    /// Weak residual passes below `WEAK_C * (dx + dt)`.
    pub const WEAK_C: f64 = 20.0;
    /// Curl residual passes below `CURL_C * dx`.
    pub const CURL_C: f64 = 20.0;
    /// One-sided slope (weak semiconcavity) passes below this constant.
    pub const OLEINIK_C: f64 = 10.0;
    /// Mollified terminal-slice gap passes below `TERMINAL_C * dx`.
    pub const TERMINAL_C: f64 = 5.0;
}

/// Scalar conservation-law data for the two-state model in the mean
/// coordinate `m` on `[-1, 1]`.
pub struct ConsLaw2<S: Real> {
    pub horizon: S,
    source: Arc<dyn Fn(S) -> S + Send + Sync>,
    terminal: Arc<dyn Fn(S) -> S + Send + Sync>,
}

/// Flux of the mean-coordinate equation.
pub fn mean_flux<S: Real>(m: S, z: S) -> S {
    m * z * z.abs() * S::c(0.5) - z * z * S::c(0.5)
}

/// Characteristic speed `d flux / d z` (piecewise linear in `z`).
pub fn mean_speed<S: Real>(m: S, z: S) -> S {
    m * z.abs() - z
}

impl<S: Real> ConsLaw2<S> {
    /// Reduction of a two-state model: source `f_2 - f_1` and terminal
    /// `g_2 - g_1`, both evaluated at `p = ((1+m)/2, (1-m)/2)`.
    pub fn reduce(model: &ModelSpec<S>) -> Result<Self> {
        if model.d != 2 {
            return Err(Error::Unsupported(model.d, "two-state reduction".into()));
        }
        let m1 = model.clone();
        let m2 = model.clone();
        let at = |m: S| {
            crate::simplex::SimplexPoint::new(vec![
                (S::one() + m) * S::c(0.5),
                (S::one() - m) * S::c(0.5),
            ])
            .expect("mean coordinate in range")
        };
        Ok(ConsLaw2 {
            horizon: model.horizon,
            source: Arc::new(move |m| {
                let f = m1.running_cost(&at(m));
                f[1] - f[0]
            }),
            terminal: Arc::new(move |m| {
                let g = m2.terminal_cost(&at(m));
                g[1] - g[0]
            }),
        })
    }

    pub fn source(&self, m: S) -> S {
        (self.source)(m)
    }

    pub fn terminal(&self, m: S) -> S {
        (self.terminal)(m)
    }
}

/// Cell-centred field on `[-1, 1] x [0, horizon]` (times ascending).
#[derive(Clone, Debug)]
pub struct LineField<S: Real> {
    pub times: Vec<S>,
    pub centers: Vec<S>,
    /// Row-major over (time, cell).
    pub values: Vec<S>,
    /// Count of steps at which a boundary characteristic pointed inward.
    pub inflow_violations: usize,
}

impl<S: Real> LineField<S> {
    pub fn at(&self, t: usize, cell: usize) -> S {
        self.values[t * self.centers.len() + cell]
    }

    pub fn dm(&self) -> S {
        self.centers[1] - self.centers[0]
    }

    /// Bilinear interpolation in `(t, m)` (clamped at the edges).
    pub fn interpolate(&self, t: S, m: S) -> S {
        let nt = self.times.len();
        let nc = self.centers.len();
        let dt = self.times[1] - self.times[0];
        let s = ((t - self.times[0]) / dt)
            .max(S::zero())
            .min(S::from_usize(nt - 1).unwrap());
        let k = (s.floor().to_f64_lossy() as usize).min(nt - 2);
        let wt = s - S::from_usize(k).unwrap();
        let dm = self.dm();
        let u = ((m - self.centers[0]) / dm)
            .max(S::zero())
            .min(S::from_usize(nc - 1).unwrap());
        let c = (u.floor().to_f64_lossy() as usize).min(nc - 2);
        let wm = u - S::from_usize(c).unwrap();
        let lerp = |a: S, b: S, w: S| (S::one() - w) * a + w * b;
        lerp(
            lerp(self.at(k, c), self.at(k, c + 1), wm),
            lerp(self.at(k + 1, c), self.at(k + 1, c + 1), wm),
            wt,
        )
    }

    /// Chart-oriented grid field on a two-state lattice: the chart gradient
    /// is the negative of the mean-coordinate gap, sampled at `m = 2x - 1`.
    pub fn to_chart_field(&self, subdivisions: usize) -> Result<GridField<S>> {
        let grid = SimplexGrid::new(2, subdivisions)?;
        let mut out = GridField::zeros(grid.clone(), self.times.clone(), 1);
        for t in 0..self.times.len() {
            for node in 0..grid.len() {
                let x = grid.chart(node).coords()[0];
                let m = S::c(2.0) * x - S::one();
                out.set(t, node, 0, -self.interpolate(self.times[t], m));
            }
        }
        Ok(out)
    }
}

/// Reversed-time conservative finite-volume solve with a local
/// Lax-Friedrichs flux and outgoing-extrapolation boundary cells. The
/// returned field is indexed by forward time (slice 0 is `t = 0`).
pub fn entropy_solve<S: Real>(law: &ConsLaw2<S>, dm: S, dt_request: S) -> Result<LineField<S>> {
    let n_cells = (S::c(2.0) / dm).round().to_f64_lossy() as usize;
    if n_cells < 4 {
        return Err(Error::InvalidConfig("mean mesh too coarse".into()));
    }
    let dm = S::c(2.0) / S::from_usize(n_cells).unwrap();
    let centers: Vec<S> = (0..n_cells)
        .map(|i| -S::one() + dm * (S::from_usize(i).unwrap() + S::c(0.5)))
        .collect();
    // data-range bound for the CFL check
    let mut data_sup = S::zero();
    let mut src_sup = S::zero();
    for &m in &centers {
        data_sup = data_sup.max(law.terminal(m).abs());
        src_sup = src_sup.max(law.source(m).abs());
    }
    let z_bound = data_sup + law.horizon * src_sup;
    let speed_bound = S::c(2.0) * z_bound + S::c(1e-12);
    if dt_request * speed_bound / dm > S::one() {
        return Err(Error::Cfl(format!(
            "dt {dt_request} violates dt * max|speed| / dm <= 1 (speed bound {speed_bound})"
        )));
    }
    let steps = (law.horizon / dt_request).ceil().to_f64_lossy() as usize;
    let dt = law.horizon / S::from_usize(steps.max(1)).unwrap();
    let nt = steps + 1;
    let mut values = vec![S::zero(); nt * n_cells];
    // reversed time: slice nt-1 holds the terminal datum, march down to 0
    for (i, &m) in centers.iter().enumerate() {
        values[(nt - 1) * n_cells + i] = law.terminal(m);
    }
    let mut inflow_violations = 0usize;
    let mut z: Vec<S> = values[(nt - 1) * n_cells..].to_vec();
    for step in (0..steps).rev() {
        // interface fluxes with ghost cells copied from the edges
        let mut fluxes = vec![S::zero(); n_cells + 1];
        for f in 0..=n_cells {
            let zl = if f == 0 { z[0] } else { z[f - 1] };
            let zr = if f == n_cells { z[n_cells - 1] } else { z[f] };
            let mf = -S::one() + dm * S::from_usize(f).unwrap();
            let a = mean_speed(mf, zl).abs().max(mean_speed(mf, zr).abs());
            fluxes[f] = S::c(0.5) * (mean_flux(mf, zl) + mean_flux(mf, zr))
                - S::c(0.5) * a * (zr - zl);
        }
        // characteristic direction check at the edges (outgoing expected)
        if mean_speed(-S::one(), z[0]) > S::c(1e-12) {
            inflow_violations += 1;
        }
        if mean_speed(S::one(), z[n_cells - 1]) < -S::c(1e-12) {
            inflow_violations += 1;
        }
        let lambda = dt / dm;
        for i in 0..n_cells {
            z[i] = z[i] - lambda * (fluxes[i + 1] - fluxes[i]) + dt * law.source(centers[i]);
        }
        values[step * n_cells..(step + 1) * n_cells].copy_from_slice(&z);
    }
    let times: Vec<S> = (0..nt)
        .map(|k| law.horizon * S::from_usize(k).unwrap() / S::from_usize(steps).unwrap())
        .collect();
    Ok(LineField { times, centers, values, inflow_violations })
}

/// Integrates the selected mean trajectory `dm/dt = Z - m |Z|` through a
/// solved gap field. At `m0 = 0` (on the jump) both branches from
/// mesh-offset starts are returned.
pub fn selected_trajectory<S: Real>(
    field: &LineField<S>,
    m0: S,
    steps: usize,
) -> Vec<Vec<S>> {
    let starts: Vec<S> = if m0 == S::zero() {
        vec![field.dm(), -field.dm()]
    } else {
        vec![m0]
    };
    let horizon = *field.times.last().unwrap();
    let dt = horizon / S::from_usize(steps).unwrap();
    starts
        .into_iter()
        .map(|start| {
            let mut m = start;
            let mut path = vec![m];
            let rhs = |t: S, m: S| -> S {
                let z = field.interpolate(t, m);
                z - m * z.abs()
            };
            for k in 0..steps {
                let t = dt * S::from_usize(k).unwrap();
                let half = dt * S::c(0.5);
                let k1 = rhs(t, m);
                let k2 = rhs(t + half, m + half * k1);
                let k3 = rhs(t + half, m + half * k2);
                let k4 = rhs(t + dt, m + dt * k3);
                m = m + dt / S::c(6.0) * (k1 + S::c(2.0) * (k2 + k3) + k4);
                m = m.max(-S::one()).min(S::one());
                path.push(m);
            }
            path
        })
        .collect()
}

/// Battery of tensor-product bump test functions compactly supported in the
/// open time-space cylinder.
pub struct TestBattery<S: Real> {
    /// (time centre, time radius, space centre, space radius)
    items: Vec<(S, S, Vec<S>, S)>,
}

fn bump<S: Real>(y: S) -> S {
    let y2 = y * y;
    if y2 >= S::one() {
        S::zero()
    } else {
        (S::one() / (y2 - S::one())).exp() * S::c(std::f64::consts::E)
    }
}

fn bump_slope<S: Real>(y: S) -> S {
    let y2 = y * y;
    if y2 >= S::one() {
        S::zero()
    } else {
        let den = y2 - S::one();
        -S::c(2.0) * y / (den * den) * (S::one() / den).exp() * S::c(std::f64::consts::E)
    }
}

impl<S: Real> TestBattery<S> {
    /// Bumps at three interior time centres, a lattice of interior space
    /// centres, and three support radii. Supports touching the boundary are
    /// discarded, and construction fails if fewer than 25 remain.
    pub fn standard(grid: &SimplexGrid<S>, horizon: S) -> Result<Self> {
        let m = grid.chart_dim();
        let mut items = Vec::new();
        let time_centres = [S::c(0.3), S::c(0.5), S::c(0.7)];
        let (radii, centres): (Vec<S>, Vec<Vec<S>>) = match m {
            1 => (
                vec![S::c(0.24), S::c(0.16), S::c(0.1)],
                vec![vec![S::c(0.3)], vec![S::c(0.5)], vec![S::c(0.7)]],
            ),
            2 => (
                vec![S::c(0.15), S::c(0.1), S::c(0.07)],
                vec![
                    vec![S::c(0.2), S::c(0.2)],
                    vec![S::c(0.35), S::c(0.25)],
                    vec![S::c(0.25), S::c(0.45)],
                    vec![S::c(0.45), S::c(0.35)],
                    vec![S::c(0.3), S::c(0.3)],
                    vec![S::c(0.2), S::c(0.4)],
                    vec![S::c(0.4), S::c(0.2)],
                ],
            ),
            _ => return Err(Error::Unsupported(m + 1, "test battery".into())),
        };
        for &tc in &time_centres {
            for centre in &centres {
                for &r in &radii {
                    let tr = S::c(0.2) * horizon;
                    // support must stay strictly inside the domain
                    let inside = match m {
                        1 => centre[0] - r > S::zero() && centre[0] + r < S::one(),
                        _ => {
                            let sum: S = centre.iter().copied().sum();
                            centre.iter().all(|&c| c - r > S::zero())
                                && sum + S::c(2.0) * r < S::one()
                        }
                    };
                    if inside {
                        items.push((tc * horizon, tr, centre.clone(), r));
                    }
                }
            }
        }
        if items.len() < 25 {
            return Err(Error::InvalidConfig(format!(
                "test battery too small ({} functions)",
                items.len()
            )));
        }
        Ok(TestBattery { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn eval(&self, idx: usize, t: S, x: &[S]) -> (S, S, Vec<S>) {
        let (tc, tr, cx, r) = &self.items[idx];
        let yt = (t - *tc) / *tr;
        let mut rad2 = S::zero();
        for (xi, ci) in x.iter().zip(cx) {
            rad2 = rad2 + (*xi - *ci) * (*xi - *ci);
        }
        let rad = rad2.sqrt();
        let ys = rad / *r;
        let time_part = bump(yt);
        let space_part = bump(ys);
        let value = time_part * space_part;
        let dt_part = bump_slope(yt) / *tr * space_part;
        // spatial gradient of the radial bump
        let mut grad = vec![S::zero(); x.len()];
        if rad > S::c(1e-14) && ys < S::one() {
            let common = time_part * bump_slope(ys) / (*r * rad);
            for ((gi, &xi), &ci) in grad.iter_mut().zip(x).zip(cx) {
                *gi = common * (xi - ci);
            }
        }
        (value, dt_part, grad)
    }
}

/// Maximum over states and test functions of the weak-form residual
/// `int int [ Z_i dphi/dt + flux(x, Z) dphi/dx_i ] dx dt` with the supplied
/// flux (chart orientation).
pub fn weak_residual<S: Real, FluxFn: Fn(&[S], &[S]) -> S>(
    field: &GridField<S>,
    flux: FluxFn,
    battery: &TestBattery<S>,
) -> Result<S> {
    let grid = &field.grid;
    let m = grid.chart_dim();
    if field.width != m {
        return Err(Error::MeshMismatch(format!(
            "field width {} does not match chart dimension {m}",
            field.width
        )));
    }
    let h = grid.h();
    let cell = h.powi(m as i32);
    let nt = field.times.len();
    let mut worst = S::zero();
    for idx in 0..battery.len() {
        let mut residuals = vec![S::zero(); m];
        for t_idx in 0..nt {
            let t = field.times[t_idx];
            let wt = if t_idx == 0 || t_idx == nt - 1 { S::c(0.5) } else { S::one() };
            let dt = field.times[1] - field.times[0];
            for node in 0..grid.len() {
                let x = grid.chart(node);
                let (_, dphi_dt, grad) = battery.eval(idx, t, x.coords());
                if dphi_dt == S::zero() && grad.iter().all(|g| *g == S::zero()) {
                    continue;
                }
                let z = field.node_values(t_idx, node);
                let fx = flux(x.coords(), z);
                for i in 0..m {
                    residuals[i] =
                        residuals[i] + wt * dt * cell * (z[i] * dphi_dt + fx * grad[i]);
                }
            }
        }
        for r in residuals {
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Conservative-system flux of a model in chart coordinates: the capped
/// chart Hamiltonian plus the running potential.
pub fn model_flux<S: Real>(model: &ModelSpec<S>) -> impl Fn(&[S], &[S]) -> S + '_ {
    move |x: &[S], z: &[S]| {
        let mut acc = S::zero();
        let mut slack = S::one();
        for (i, &xi) in x.iter().enumerate() {
            acc = acc + xi * chart_hamiltonian(i, z, model.cap());
            slack = slack - xi;
        }
        acc = acc + slack * chart_hamiltonian(x.len(), z, model.cap());
        let p = ChartPoint::new_clamped(x).from_chart();
        acc + model.running_potential(&p)
    }
}

/// Maximum over component pairs, time slices, and space bumps of the curl
/// functional `int [ Z_i dw/dx_j - Z_j dw/dx_i ] dx` (needs chart dimension
/// at least two). Small for gradient fields.
pub fn curl_residual<S: Real>(field: &GridField<S>, battery: &TestBattery<S>) -> Result<S> {
    let grid = &field.grid;
    let m = grid.chart_dim();
    if m < 2 {
        return Err(Error::Unsupported(m + 1, "curl test needs at least three states".into()));
    }
    let h = grid.h();
    let cell = h.powi(m as i32);
    let mut worst = S::zero();
    for idx in 0..battery.len() {
        for t_idx in 0..field.times.len() {
            // space-only test: evaluate the bump at its own time centre
            let t = battery.items[idx].0;
            let mut acc = vec![S::zero(); m * m];
            for node in 0..grid.len() {
                let x = grid.chart(node);
                let (_, _, grad) = battery.eval(idx, t, x.coords());
                if grad.iter().all(|g| *g == S::zero()) {
                    continue;
                }
                let z = field.node_values(t_idx, node);
                for i in 0..m {
                    for j in (i + 1)..m {
                        acc[i * m + j] =
                            acc[i * m + j] + cell * (z[i] * grad[j] - z[j] * grad[i]);
                    }
                }
            }
            for v in acc {
                worst = worst.max(v.abs());
            }
        }
    }
    Ok(worst)
}

/// One-sided slope / weak-semiconcavity estimate per time slice: for chart
/// dimension one the maximum forward difference quotient, in general the
/// smallest `c` admissible in the rank-one weak inequality over the battery
/// directions.
pub struct OleinikReport<S: Real> {
    pub per_slice: Vec<S>,
    pub overall: S,
}

pub fn oleinik_check<S: Real>(field: &GridField<S>, battery: &TestBattery<S>) -> OleinikReport<S> {
    let grid = &field.grid;
    let m = grid.chart_dim();
    let h = grid.h();
    let mut per_slice = Vec::with_capacity(field.times.len());
    if m == 1 {
        for t in 0..field.times.len() {
            let mut worst = S::neg_infinity();
            for node in 0..grid.len() {
                if let Some(up) = grid.neighbor(node, 0, 1) {
                    worst = worst.max((field.at(t, up, 0) - field.at(t, node, 0)) / h);
                }
            }
            per_slice.push(worst);
        }
    } else {
        // directions: axes, pairwise differences, and the diagonal
        let mut dirs: Vec<Vec<S>> = Vec::new();
        for a in 0..m {
            let mut e = vec![S::zero(); m];
            e[a] = S::one();
            dirs.push(e);
        }
        for a in 0..m {
            for b in (a + 1)..m {
                let mut e = vec![S::zero(); m];
                let s = S::c(std::f64::consts::FRAC_1_SQRT_2);
                e[a] = s;
                e[b] = -s;
                dirs.push(e);
            }
        }
        let cell = h.powi(m as i32);
        for t in 0..field.times.len() {
            let mut worst = S::neg_infinity();
            for idx in 0..battery.len() {
                let tc = battery.items[idx].0;
                let mut num = vec![S::zero(); dirs.len()];
                let mut den = S::zero();
                for node in 0..grid.len() {
                    let x = grid.chart(node);
                    let (value, _, grad) = battery.eval(idx, tc, x.coords());
                    if value == S::zero() {
                        continue;
                    }
                    den = den + cell * value;
                    let z = field.node_values(t, node);
                    for (widx, e) in dirs.iter().enumerate() {
                        let edotg: S = e.iter().zip(&grad).map(|(&a, &b)| a * b).sum();
                        let edotz: S = e.iter().zip(z).map(|(&a, &b)| a * b).sum();
                        num[widx] = num[widx] + cell * edotg * edotz;
                    }
                }
                if den > S::zero() {
                    for v in &num {
                        worst = worst.max(-*v / den);
                    }
                }
            }
            per_slice.push(worst);
        }
    }
    let overall = per_slice.iter().copied().fold(S::neg_infinity(), S::max);
    OleinikReport { per_slice, overall }
}

/// Mollified terminal-slice agreement at three mollification scales: the
/// maximum over scales and space bumps of
/// `| int (Z(T, x) - datum(x)) rho_sigma(x) dx |`.
pub fn terminal_slice_gap<S: Real, Datum: Fn(&[S]) -> Vec<S>>(
    field: &GridField<S>,
    datum: Datum,
) -> S {
    let grid = &field.grid;
    let m = grid.chart_dim();
    let h = grid.h();
    let cell = h.powi(m as i32);
    let t_last = field.times.len() - 1;
    let mut worst = S::zero();
    for scale in [S::c(2.0), S::c(4.0), S::c(8.0)] {
        let sigma = scale * h;
        // centres on a coarse interior lattice
        for node in 0..grid.len() {
            if !grid.is_interior(node) {
                continue;
            }
            let c = grid.chart(node);
            // keep the mollifier support inside the chart
            let sum: S = c.coords().iter().copied().sum();
            let near_edge = c.coords().iter().any(|&v| v < sigma) || sum > S::one() - sigma;
            if near_edge {
                continue;
            }
            let mut acc = vec![S::zero(); field.width];
            let mut mass = S::zero();
            for other in 0..grid.len() {
                let x = grid.chart(other);
                let mut r2 = S::zero();
                for (a, b) in x.coords().iter().zip(c.coords()) {
                    r2 = r2 + (*a - *b) * (*a - *b);
                }
                let w = bump(r2.sqrt() / sigma);
                if w == S::zero() {
                    continue;
                }
                mass = mass + w * cell;
                let z = field.node_values(t_last, other);
                let g = datum(x.coords());
                for i in 0..field.width {
                    acc[i] = acc[i] + w * cell * (z[i] - g[i]);
                }
            }
            if mass > S::zero() {
                for v in acc {
                    worst = worst.max((v / mass).abs());
                }
            }
        }
    }
    worst
}

/// Certification outcome for one clause.
#[derive(Clone, Debug)]
pub struct Clause<S: Real> {
    pub name: &'static str,
    pub residual: S,
    pub threshold: S,
    pub passed: bool,
}

/// Per-clause certification of a candidate chart field against the
/// admissibility definition: weak residual, potential (curl) test where the
/// dimension allows it, one-sided slope bound, and terminal agreement.
pub struct Certification<S: Real> {
    pub clauses: Vec<Clause<S>>,
    pub admissible: bool,
}

pub fn certify<S: Real>(
    field: &GridField<S>,
    model: &ModelSpec<S>,
    battery: &TestBattery<S>,
) -> Result<Certification<S>> {
    let grid = &field.grid;
    let h = grid.h().to_f64_lossy();
    let dt = (field.times[1] - field.times[0]).to_f64_lossy();
    let mut clauses = Vec::new();
    let weak = weak_residual(field, model_flux(model), battery)?;
    clauses.push(Clause {
        name: "weak residual",
        residual: weak,
        threshold: S::c(thresholds::WEAK_C * (h + dt)),
        passed: weak <= S::c(thresholds::WEAK_C * (h + dt)),
    });
    if grid.chart_dim() >= 2 {
        let curl = curl_residual(field, battery)?;
        clauses.push(Clause {
            name: "curl (potential) residual",
            residual: curl,
            threshold: S::c(thresholds::CURL_C * h),
            passed: curl <= S::c(thresholds::CURL_C * h),
        });
    }
    let oleinik = oleinik_check(field, battery);
    clauses.push(Clause {
        name: "one-sided slope",
        residual: oleinik.overall,
        threshold: S::c(thresholds::OLEINIK_C),
        passed: oleinik.overall <= S::c(thresholds::OLEINIK_C),
    });
    let gap = terminal_slice_gap(field, |x| {
        // terminal datum of the conservative system: chart gradient of G
        let p = ChartPoint::new_clamped(x).from_chart();
        let g = model.terminal_cost(&p);
        let d = g.len();
        (0..d - 1).map(|i| g[i] - g[d - 1]).collect()
    });
    clauses.push(Clause {
        name: "terminal slice",
        residual: gap,
        threshold: S::c(thresholds::TERMINAL_C * h),
        passed: gap <= S::c(thresholds::TERMINAL_C * h),
    });
    let admissible = clauses.iter().all(|c| c.passed);
    Ok(Certification { clauses, admissible })
}
