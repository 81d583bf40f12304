//! Generation by integrating the learned field from `t = 1` (prior) to
//! `t = 0` (data), and the decoding of continuous features.

use crate::data::{Element, MoleculeGeometry, CHARGE_CHANNEL, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{self, Rng};
use crate::vectorfield::VectorFieldModel;

/// Number of uniform `t`-bins in the NFE histogram.
pub const NFE_BINS: usize = 20;
/// Width of the Gaussian used by the integer-feature rounding rule.
pub const DEFAULT_SIGMA0: f64 = 0.25;
/// Stored trajectory states are decimated to at most this many.
pub const MAX_STORED_STATES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "euler" => Method::Euler,
            "midpoint" => Method::Midpoint,
            "rk4" => Method::Rk4,
            "dopri5" => Method::Dopri5,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown integrator {other:?} (expected euler, midpoint, rk4 or dopri5)"
                )))
            }
        })
    }

    /// Field evaluations per fixed step.
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
            Method::Dopri5 => 6,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Method::Rk4 => 50,
            _ => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSpec {
    pub method: Method,
    /// Fixed-step methods only.
    pub n_steps: usize,
    /// Dopri5 only.
    pub rtol: f64,
    pub atol: f64,
    /// Initial (negative) step of dopri5.
    pub initial_step: f64,
    pub max_nfe: usize,
    /// Keep every state instead of decimating to [`MAX_STORED_STATES`].
    pub store_all: bool,
}

impl IntegratorSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            n_steps: method.default_steps(),
            rtol: 1e-4,
            atol: 1e-4,
            initial_step: -1e-2,
            max_nfe: 100_000,
            store_all: false,
        }
    }

    pub fn fixed(method: Method, n_steps: usize) -> Self {
        Self { n_steps, ..Self::new(method) }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::new(Method::Dopri5) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument("rtol and atol must be positive".into()));
        }
        if !(self.initial_step < 0.0 && self.initial_step >= -1.0) {
            return Err(Error::InvalidArgument("initial_step must lie in [-1, 0)".into()));
        }
        if self.max_nfe == 0 {
            return Err(Error::InvalidArgument("max_nfe must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self::new(Method::Dopri5)
    }
}

/// Bins are half-open from below, `(k/20, (k+1)/20]`, matching reverse-time
/// steps that start at their upper end; `t = 0` falls in bin 0.
fn bin_of(t: f64) -> usize {
    let mut s = t * NFE_BINS as f64;
    if (s - s.round()).abs() < 1e-9 {
        s = s.round();
    }
    (s.ceil() as isize - 1).clamp(0, NFE_BINS as isize - 1) as usize
}

/// Wraps a field with NFE accounting per time bin.
struct Counted<F> {
    f: F,
    nfe: usize,
    by_bin: [usize; NFE_BINS],
    max_nfe: usize,
}

impl<F: FnMut(f64, &[f64]) -> Result<Vec<f64>>> Counted<F> {
    fn eval(&mut self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        if self.nfe >= self.max_nfe {
            return Err(Error::NfeBudgetExceeded { max_nfe: self.max_nfe, t });
        }
        self.nfe += 1;
        self.by_bin[bin_of(t)] += 1;
        let v = (self.f)(t, y)?;
        if v.len() != y.len() {
            return Err(Error::LengthMismatch { expected: y.len(), got: v.len() });
        }
        Ok(v)
    }
}

fn axpy_new(y: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect()
}

/// `y + dt·f(t, y)`.
pub fn step_euler<F: FnMut(f64, &[f64]) -> Result<Vec<f64>>>(mut f: F, t: f64, y: &[f64], dt: f64) -> Result<Vec<f64>> {
    let k = f(t, y)?;
    Ok(axpy_new(y, dt, &k))
}

/// Explicit midpoint rule.
pub fn step_midpoint<F: FnMut(f64, &[f64]) -> Result<Vec<f64>>>(
    mut f: F,
    t: f64,
    y: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * dt, &axpy_new(y, 0.5 * dt, &k1))?;
    Ok(axpy_new(y, dt, &k2))
}

/// Classical fourth-order Runge–Kutta.
pub fn step_rk4<F: FnMut(f64, &[f64]) -> Result<Vec<f64>>>(mut f: F, t: f64, y: &[f64], dt: f64) -> Result<Vec<f64>> {
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * dt, &axpy_new(y, 0.5 * dt, &k1))?;
    let k3 = f(t + 0.5 * dt, &axpy_new(y, 0.5 * dt, &k2))?;
    let k4 = f(t + dt, &axpy_new(y, dt, &k3))?;
    Ok(y.iter().enumerate().map(|(i, yi)| yi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

/// Result of integrating a flat state from `t = 1` to `t = 0`.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    /// `(t, y)` pairs with strictly decreasing `t`, first `t = 1`, last `t = 0`.
    pub states: Vec<(f64, Vec<f64>)>,
    pub nfe_total: usize,
    pub nfe_by_interval: [usize; NFE_BINS],
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest scaled local error estimate over accepted dopri5 steps.
    pub max_accepted_error: f64,
}

impl OdeSolution {
    pub fn final_state(&self) -> &[f64] {
        &self.states.last().expect("at least one state").1
    }
}

fn decimate<T>(states: Vec<T>) -> Vec<T> {
    let n = states.len();
    if n <= MAX_STORED_STATES {
        return states;
    }
    // Evenly spaced indices including both ends.
    let keep: Vec<usize> =
        (0..MAX_STORED_STATES).map(|k| (k * (n - 1) + (MAX_STORED_STATES - 1) / 2) / (MAX_STORED_STATES - 1)).collect();
    let mut out = Vec::with_capacity(MAX_STORED_STATES);
    let mut next = 0;
    for (i, s) in states.into_iter().enumerate() {
        if next < keep.len() && keep[next] == i {
            out.push(s);
            next += 1;
            while next < keep.len() && keep[next] == i {
                next += 1;
            }
        }
    }
    out
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

/// Integrate `dy/dt = f(t, y)` from `t = 1` down to `t = 0`.
pub fn solve_ode<F>(f: F, y1: &[f64], spec: &IntegratorSpec) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    spec.validate()?;
    let mut field = Counted { f, nfe: 0, by_bin: [0; NFE_BINS], max_nfe: spec.max_nfe };
    let mut states = vec![(1.0, y1.to_vec())];
    let mut accepted = 0;
    let mut rejected = 0;
    let mut max_err: f64 = 0.0;

    match spec.method {
        Method::Euler | Method::Midpoint | Method::Rk4 => {
            let n = spec.n_steps;
            let mut y = y1.to_vec();
            for k in 0..n {
                let t = (n - k) as f64 / n as f64;
                let t_next = (n - k - 1) as f64 / n as f64;
                let dt = t_next - t;
                let eval = |t: f64, y: &[f64]| field.eval(t, y);
                y = match spec.method {
                    Method::Euler => step_euler(eval, t, &y, dt)?,
                    Method::Midpoint => step_midpoint(eval, t, &y, dt)?,
                    _ => step_rk4(eval, t, &y, dt)?,
                };
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { t: t_next });
                }
                accepted += 1;
                states.push((t_next, y.clone()));
            }
        }
        Method::Dopri5 => {
            let mut t = 1.0f64;
            let mut y = y1.to_vec();
            let mut h = spec.initial_step;
            let mut k1 = field.eval(t, &y)?;
            let mut prev_err: f64 = 1e-4;
            let mut just_rejected = false;
            while t > 0.0 {
                if t + h < 1e-14 {
                    h = -t;
                }
                if h.abs() < 1e-12 {
                    return Err(Error::NonFiniteState { t });
                }
                let mut k = vec![k1.clone()];
                for s in 1..7 {
                    let mut ys = y.clone();
                    for (a, ks) in A[s].iter().zip(&k) {
                        if *a != 0.0 {
                            for (yi, ki) in ys.iter_mut().zip(ks) {
                                *yi += h * a * ki;
                            }
                        }
                    }
                    if s == 6 {
                        // Stage 7 is evaluated at the candidate solution (FSAL).
                        if ys.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFiniteState { t: t + h });
                        }
                        let y_new = ys;
                        let t_new = if (t + h).abs() < 1e-14 { 0.0 } else { t + h };
                        let k7 = field.eval(t_new, &y_new)?;
                        k.push(k7);
                        let err = error_norm(&y, &y_new, &k, h, spec);
                        if err <= 1.0 {
                            let factor = if err == 0.0 {
                                MAX_FACTOR
                            } else {
                                SAFETY * err.powf(-PI_ALPHA) * prev_err.powf(PI_BETA)
                            };
                            let factor = if just_rejected { factor.min(1.0) } else { factor };
                            max_err = max_err.max(err);
                            prev_err = err.max(1e-4);
                            accepted += 1;
                            just_rejected = false;
                            t = t_new;
                            y = y_new;
                            k1 = k.pop().expect("seven stages");
                            states.push((t, y.clone()));
                            h *= factor.clamp(MIN_FACTOR, MAX_FACTOR);
                        } else {
                            let factor = (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
                            rejected += 1;
                            just_rejected = true;
                            h *= factor;
                        }
                        break;
                    }
                    let ts = t + C[s] * h;
                    k.push(field.eval(ts, &ys)?);
                }
            }
        }
    }

    let states = if spec.store_all { states } else { decimate(states) };
    Ok(OdeSolution {
        states,
        nfe_total: field.nfe,
        nfe_by_interval: field.by_bin,
        accepted_steps: accepted,
        rejected_steps: rejected,
        max_accepted_error: max_err,
    })
}

fn error_norm(y: &[f64], y_new: &[f64], k: &[Vec<f64>], h: f64, spec: &IntegratorSpec) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let e: f64 = h * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>();
        let scale = spec.atol + spec.rtol * y[i].abs().max(y_new[i].abs());
        acc += (e / scale).powi(2);
    }
    (acc / y.len().max(1) as f64).sqrt()
}

/// One generation run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Decimated `(t, g)` states, `t` strictly decreasing from 1 to 0.
    pub states: Vec<(f64, MoleculeGeometry)>,
    pub nfe_total: usize,
    pub nfe_by_interval: [usize; NFE_BINS],
    pub rejected_steps: usize,
    pub max_accepted_error: f64,
}

impl Trajectory {
    /// The generated geometry at `t = 0`.
    pub fn final_geometry(&self) -> &MoleculeGeometry {
        &self.states.last().expect("at least one state").1
    }
}

fn split_state(y: &[f64], n: usize, d: usize) -> Result<MoleculeGeometry> {
    MoleculeGeometry::new(PointCloud::from_flat(&y[..3 * n])?, y[3 * n..].to_vec(), d)
}

/// Solve `dg/dt = v_θ(g, t)` from `g1` at `t = 1` down to `t = 0`.
pub fn integrate(model: &VectorFieldModel, g1: &MoleculeGeometry, spec: &IntegratorSpec) -> Result<Trajectory> {
    let n = g1.n_nodes();
    let d = g1.d;
    if d != model.config().feature_dim {
        return Err(Error::LengthMismatch { expected: model.config().feature_dim, got: d });
    }
    let mut y1 = g1.coords.to_flat();
    y1.extend_from_slice(&g1.features);
    let field = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        let out = model.forward_flat(&y[..3 * n], &y[3 * n..], t).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteState { t },
            other => other,
        })?;
        let mut v = out.vx;
        v.extend_from_slice(&out.vh);
        Ok(v)
    };
    let sol = solve_ode(field, &y1, spec)?;
    let states = sol.states.iter().map(|(t, y)| Ok((*t, split_state(y, n, d)?))).collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        states,
        nfe_total: sol.nfe_total,
        nfe_by_interval: sol.nfe_by_interval,
        rejected_steps: sol.rejected_steps,
        max_accepted_error: sol.max_accepted_error,
    })
}

/// Standard-normal prior draw with Zero-CoM coordinates.
pub fn prior_sample(n: usize, d: usize, rng: &mut Rng) -> MoleculeGeometry {
    let coords = PointCloud::standard_normal(n, rng);
    let features = rng::normals(rng, n * d);
    MoleculeGeometry::new(coords, features, d).expect("finite normal draws")
}

/// Decode continuous features: atom type by argmax over the one-hot block,
/// charge as the integer `q` maximizing `∫_{q−½}^{q+½} N(u | c, σ0²) du`.
pub fn discretize_features(h0: &[f64], d: usize, sigma0: f64) -> Result<(Vec<Element>, Vec<i32>)> {
    if d != FEATURE_DIM {
        return Err(Error::LengthMismatch { expected: FEATURE_DIM, got: d });
    }
    if !h0.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(format!("feature buffer of length {} is not N×{d}", h0.len())));
    }
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidArgument("sigma0 must be positive".into()));
    }
    let mut elements = Vec::with_capacity(h0.len() / d);
    let mut charges = Vec::with_capacity(h0.len() / d);
    for row in h0.chunks(d) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let (best, _) = row[..Element::ALL.len()].iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        });
        elements.push(Element::ALL[best]);
        charges.push(round_charge(row[CHARGE_CHANNEL], sigma0));
    }
    Ok((elements, charges))
}

fn interval_mass(q: f64, c: f64, sigma0: f64) -> f64 {
    let z = |u: f64| (u - c) / (sigma0 * std::f64::consts::SQRT_2);
    0.5 * (libm::erf(z(q + 0.5)) - libm::erf(z(q - 0.5)))
}

fn round_charge(c: f64, sigma0: f64) -> i32 {
    let center = c.round();
    let mut best = (center, f64::NEG_INFINITY);
    for q in [center - 1.0, center, center + 1.0] {
        let m = interval_mass(q, c, sigma0);
        if m > best.1 {
            best = (q, m);
        }
    }
    best.0 as i32
}

/// Output of [`sample_batch`].
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub samples: Vec<MoleculeGeometry>,
    pub nfe: Vec<usize>,
    pub nfe_by_interval: [usize; NFE_BINS],
    pub rejected_steps: usize,
}

impl SampleBatch {
    pub fn nfe_total(&self) -> usize {
        self.nfe.iter().sum()
    }

    /// CSV with header `bin,t_lo,t_hi,nfe`.
    pub fn nfe_histogram_csv(&self) -> String {
        let mut out = String::from("bin,t_lo,t_hi,nfe\n");
        for (b, c) in self.nfe_by_interval.iter().enumerate() {
            let lo = b as f64 / NFE_BINS as f64;
            let hi = (b + 1) as f64 / NFE_BINS as f64;
            out.push_str(&format!("{b},{lo:.2},{hi:.2},{c}\n"));
        }
        out
    }
}

/// Draw one prior sample per entry of `node_counts` (serially, from `rng`)
/// and integrate each to `t = 0`.
pub fn sample_batch(
    model: &VectorFieldModel,
    node_counts: &[usize],
    spec: &IntegratorSpec,
    rng: &mut Rng,
) -> Result<SampleBatch> {
    let d = model.config().feature_dim;
    let priors: Vec<MoleculeGeometry> = node_counts.iter().map(|&n| prior_sample(n, d, rng)).collect();
    let run = |g: &MoleculeGeometry| integrate(model, g, spec);
    #[cfg(feature = "parallel")]
    let trajs: Vec<Result<Trajectory>> = {
        use rayon::prelude::*;
        priors.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let trajs: Vec<Result<Trajectory>> = priors.iter().map(run).collect();

    let mut batch = SampleBatch::default();
    for tr in trajs {
        let tr = tr?;
        batch.nfe.push(tr.nfe_total);
        for (acc, c) in batch.nfe_by_interval.iter_mut().zip(tr.nfe_by_interval) {
            *acc += c;
        }
        batch.rejected_steps += tr.rejected_steps;
        batch.samples.push(tr.final_geometry().clone());
    }
    Ok(batch)
}
