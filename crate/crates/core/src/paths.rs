//! Conditional probability paths and their target vector fields.
//!
//! Time runs from data (`t = 0`) to prior (`t = 1`). Every path is Gaussian
//! conditional on the data point `x0`, with mean `m(t)·x0` and standard
//! deviation `s(t)`:
//!
//! | path | `m(t)` | `s(t)` |
//! |------|--------|--------|
//! | OT / EOT | `1 − t` | `σ_min + (1 − σ_min)·t` |
//! | VP | `α(t)` | `√(1 − α(t)²)` |
//!
//! The EOT path is the OT path applied after aligning the prior draw to the
//! data with [`crate::alignment::solve_eot`].

use crate::alignment::{solve_eot, EotOptions, EotPlan};
use crate::data::MoleculeGeometry;
use crate::error::{Error, Result};
use crate::geometry::{apply, project_zero_com_flat, PointCloud};
use crate::rng::{self, Rng};

/// Default `σ_min` of the OT and EOT paths.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
/// VP target fields are rejected below this time, where `1 − α²` vanishes.
pub const VP_T_MIN: f64 = 1e-5;

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// A variance-preserving noise schedule `α(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule {
    /// `β(t) = β_min + t(β_max − β_min)`, `α = exp(−½∫₀ᵗβ)`.
    Linear { beta_min: f64, beta_max: f64 },
    /// `α = cos(½π(t + s)/(1 + s))`, clamped at 0.
    Cosine { s: f64 },
    /// `α = (1 − 2p)(1 − t^k) + p`, with `p` the precision clamp.
    Polynomial { power: f64, precision: f64 },
}

impl NoiseSchedule {
    pub const LINEAR: NoiseSchedule = NoiseSchedule::Linear { beta_min: 0.1, beta_max: 20.0 };
    pub const COSINE: NoiseSchedule = NoiseSchedule::Cosine { s: 0.008 };
    pub const POLYNOMIAL: NoiseSchedule = NoiseSchedule::Polynomial { power: 2.0, precision: 1e-5 };

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSchedule::Linear { .. } => "linear",
            NoiseSchedule::Cosine { .. } => "cosine",
            NoiseSchedule::Polynomial { .. } => "polynomial",
        }
    }

    /// Default-parameter schedule by name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::LINEAR),
            "cosine" => Ok(Self::COSINE),
            "polynomial" => Ok(Self::POLYNOMIAL),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule {other:?} (expected linear, cosine or polynomial)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::Linear { beta_min, beta_max } => {
                beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()
            }
            NoiseSchedule::Cosine { s } => s > 0.0 && s < 1.0,
            NoiseSchedule::Polynomial { power, precision } => {
                power >= 1.0 && power.is_finite() && precision > 0.0 && precision < 0.5
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid schedule parameters: {self:?}")))
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(self.alpha_prime_unchecked(t))
    }

    /// `α² / (1 − α²)`, defined for `t ∈ (0, 1]`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, 1]" });
        }
        let a2 = self.alpha_unchecked(t).powi(2);
        Ok(a2 / (1.0 - a2))
    }

    fn alpha_unchecked(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear { beta_min, beta_max } => {
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                (-0.5 * integral).exp()
            }
            NoiseSchedule::Cosine { s } => {
                let phi = 0.5 * std::f64::consts::PI * (t + s) / (1.0 + s);
                phi.cos().max(0.0)
            }
            NoiseSchedule::Polynomial { power, precision } => {
                (1.0 - 2.0 * precision) * (1.0 - t.powf(power)) + precision
            }
        }
    }

    fn alpha_prime_unchecked(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear { beta_min, beta_max } => {
                let beta = beta_min + t * (beta_max - beta_min);
                -0.5 * beta * self.alpha_unchecked(t)
            }
            NoiseSchedule::Cosine { s } => {
                let scale = 0.5 * std::f64::consts::PI / (1.0 + s);
                let phi = scale * (t + s);
                if phi.cos() <= 0.0 {
                    0.0
                } else {
                    -scale * phi.sin()
                }
            }
            NoiseSchedule::Polynomial { power, precision } => -(1.0 - 2.0 * precision) * power * t.powf(power - 1.0),
        }
    }
}

/// One member of a path family, applied to a single modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionalPath {
    Ot { sigma_min: f64 },
    Vp { schedule: NoiseSchedule },
    Eot { sigma_min: f64 },
}

impl ConditionalPath {
    pub fn ot(sigma_min: f64) -> Result<Self> {
        let p = ConditionalPath::Ot { sigma_min };
        p.validate()?;
        Ok(p)
    }

    pub fn eot(sigma_min: f64) -> Result<Self> {
        let p = ConditionalPath::Eot { sigma_min };
        p.validate()?;
        Ok(p)
    }

    pub fn vp(schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(ConditionalPath::Vp { schedule })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConditionalPath::Ot { sigma_min } | ConditionalPath::Eot { sigma_min } => {
                if sigma_min > 0.0 && sigma_min <= 0.1 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("sigma_min must lie in (0, 0.1], got {sigma_min}")))
                }
            }
            ConditionalPath::Vp { schedule } => schedule.validate(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ConditionalPath::Ot { .. } => "ot".into(),
            ConditionalPath::Eot { .. } => "eot".into(),
            ConditionalPath::Vp { schedule } => format!("vp_{}", schedule.name()),
        }
    }

    /// Mean coefficient `m(t)` of `p_t(·|x0) = N(m(t)·x0, s(t)²)`.
    pub fn mean_coef(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(match *self {
            ConditionalPath::Ot { .. } | ConditionalPath::Eot { .. } => 1.0 - t,
            ConditionalPath::Vp { schedule } => schedule.alpha_unchecked(t),
        })
    }

    /// Standard deviation `s(t)` of the conditional path.
    pub fn std_coef(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(match *self {
            ConditionalPath::Ot { sigma_min } | ConditionalPath::Eot { sigma_min } => sigma_min + (1.0 - sigma_min) * t,
            ConditionalPath::Vp { schedule } => (1.0 - schedule.alpha_unchecked(t).powi(2)).max(0.0).sqrt(),
        })
    }

    /// Interpolant and target field for already-aligned noise `eps`.
    ///
    /// For EOT the caller is responsible for the alignment; this applies the
    /// OT formulas to whatever `eps` it is given.
    pub fn sample_and_target(&self, x0: &[f64], eps: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        match *self {
            ConditionalPath::Ot { sigma_min } | ConditionalPath::Eot { sigma_min } => {
                Ok((ot_interpolate(eps, x0, t, sigma_min)?, ot_target_field(eps, x0, sigma_min)?))
            }
            ConditionalPath::Vp { schedule } => {
                let xt = vp_sample(x0, t, &schedule, eps)?;
                let u = vp_target_field(&xt, x0, t, &schedule)?;
                Ok((xt, u))
            }
        }
    }
}

/// `ψ_t = (σ_min + (1 − σ_min)t)·x1 + (1 − t)·x0`.
pub fn ot_interpolate(x1: &[f64], x0: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    check_same_len(x1, x0)?;
    check_unit_time(t)?;
    let a = sigma_min + (1.0 - sigma_min) * t;
    let b = 1.0 - t;
    Ok(x1.iter().zip(x0).map(|(p, d)| a * p + b * d).collect())
}

/// `u = (1 − σ_min)·x1 − x0`; independent of `t`.
pub fn ot_target_field(x1: &[f64], x0: &[f64], sigma_min: f64) -> Result<Vec<f64>> {
    check_same_len(x1, x0)?;
    Ok(x1.iter().zip(x0).map(|(p, d)| (1.0 - sigma_min) * p - d).collect())
}

/// `x_t = α·x0 + √(1 − α²)·eps`.
pub fn vp_sample(x0: &[f64], t: f64, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    check_same_len(x0, eps)?;
    let a = schedule.alpha(t)?;
    let s = (1.0 - a * a).max(0.0).sqrt();
    Ok(x0.iter().zip(eps).map(|(d, e)| a * d + s * e).collect())
}

/// Velocity of the VP flow through `x`: `u = α′/(1 − α²)·(x0 − α·x)`.
///
/// This is the time derivative of [`vp_sample`] at fixed `eps`, rewritten in
/// terms of the current point.
pub fn vp_target_field(x: &[f64], x0: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_same_len(x, x0)?;
    check_unit_time(t)?;
    if t < VP_T_MIN {
        return Err(Error::TimeOutOfRange { t, range: "[1e-5, 1]" });
    }
    let a = schedule.alpha_unchecked(t);
    let ap = schedule.alpha_prime_unchecked(t);
    let k = ap / (1.0 - a * a);
    Ok(x.iter().zip(x0).map(|(xi, di)| k * (di - a * xi)).collect())
}

/// OT interpolant and target after aligning `x1` to `x0` with `plan`.
///
/// Returns `(x_t, u_x)` as clouds; `u_x` is projected to Zero-CoM.
pub fn eot_training_pair(
    x1: &PointCloud,
    x0: &PointCloud,
    t: f64,
    sigma_min: f64,
    plan: &EotPlan,
) -> Result<(PointCloud, PointCloud)> {
    if x1.len() != x0.len() {
        return Err(Error::LengthMismatch { expected: x0.len(), got: x1.len() });
    }
    let aligned = apply(x1, &plan.rotation, &plan.permutation)?;
    let a = aligned.to_flat();
    let d = x0.to_flat();
    let xt = ot_interpolate(&a, &d, t, sigma_min)?;
    let mut u = ot_target_field(&a, &d, sigma_min)?;
    project_zero_com_flat(&mut u);
    Ok((PointCloud::from_flat(&xt)?, PointCloud::from_flat(&u)?))
}

/// Independent paths for coordinates and features.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPath {
    pub path_x: ConditionalPath,
    pub path_h: ConditionalPath,
    /// Solver settings used when `path_x` is EOT.
    pub eot: EotOptions,
}

impl HybridPath {
    pub fn new(path_x: ConditionalPath, path_h: ConditionalPath) -> Result<Self> {
        path_x.validate()?;
        path_h.validate()?;
        if matches!(path_h, ConditionalPath::Eot { .. }) {
            return Err(Error::InvalidArgument("EOT alignment applies to coordinates only".into()));
        }
        Ok(Self { path_x, path_h, eot: EotOptions::default() })
    }

    pub fn with_eot_options(mut self, eot: EotOptions) -> Self {
        self.eot = eot;
        self
    }
}

impl Default for HybridPath {
    /// EOT on coordinates, linear VP on features.
    fn default() -> Self {
        Self {
            path_x: ConditionalPath::Eot { sigma_min: DEFAULT_SIGMA_MIN },
            path_h: ConditionalPath::Vp { schedule: NoiseSchedule::LINEAR },
            eot: EotOptions::default(),
        }
    }
}

/// Standard-normal draws for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    /// Zero-CoM coordinate noise.
    pub eps_x: PointCloud,
    /// Feature noise, row-major `N×d`.
    pub eps_h: Vec<f64>,
}

/// Draw `ε_x` (then project it to Zero-CoM) followed by `ε_h`.
pub fn draw_noise(n: usize, d: usize, rng: &mut Rng) -> PathNoise {
    let eps_x = PointCloud::standard_normal(n, rng);
    let eps_h = rng::normals(rng, n * d);
    PathNoise { eps_x, eps_h }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub g_t: MoleculeGeometry,
    pub t: f64,
    /// Coordinate target, row-major `N×3`, Zero-CoM.
    pub u_x: Vec<f64>,
    /// Feature target, row-major `N×d`.
    pub u_h: Vec<f64>,
    pub plan: Option<EotPlan>,
}

/// Interpolated geometry and targets for fixed noise.
///
/// The coordinate part depends only on `(g0.coords, noise.eps_x, t, rng)` and
/// the feature part only on `(g0.features, noise.eps_h, t)`. The rng is used
/// solely by the EOT restarts.
pub fn hybrid_training_pair(
    g0: &MoleculeGeometry,
    t: f64,
    hp: &HybridPath,
    noise: &PathNoise,
    rng: &mut Rng,
) -> Result<TrainingSample> {
    check_unit_time(t)?;
    let n = g0.n_nodes();
    if noise.eps_x.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: noise.eps_x.len() });
    }
    if noise.eps_h.len() != g0.features.len() {
        return Err(Error::LengthMismatch { expected: g0.features.len(), got: noise.eps_h.len() });
    }

    let (xt, u_x, plan) = match hp.path_x {
        ConditionalPath::Eot { sigma_min } => {
            let plan = solve_eot(&noise.eps_x, &g0.coords, &hp.eot, rng)?;
            let (xt, u) = eot_training_pair(&noise.eps_x, &g0.coords, t, sigma_min, &plan)?;
            (xt.to_flat(), u.to_flat(), Some(plan))
        }
        path => {
            let (xt, mut u) = path.sample_and_target(&g0.coords.to_flat(), &noise.eps_x.to_flat(), t)?;
            project_zero_com_flat(&mut u);
            (xt, u, None)
        }
    };
    let (ht, u_h) = match hp.path_h {
        ConditionalPath::Eot { .. } => {
            return Err(Error::InvalidArgument("EOT alignment applies to coordinates only".into()))
        }
        path => path.sample_and_target(&g0.features, &noise.eps_h, t)?,
    };

    let mut xt = xt;
    project_zero_com_flat(&mut xt);
    let g_t = MoleculeGeometry::new(PointCloud::from_flat(&xt)?, ht, g0.d)?;
    Ok(TrainingSample { g_t, t, u_x, u_h, plan })
}

/// Draw noise and build one training sample.
pub fn hybrid_training_sample(g0: &MoleculeGeometry, t: f64, hp: &HybridPath, rng: &mut Rng) -> Result<TrainingSample> {
    check_unit_time(t)?;
    let noise = draw_noise(g0.n_nodes(), g0.d, rng);
    hybrid_training_pair(g0, t, hp, &noise, rng)
}
