//! JSON run configuration. Every section is optional; unknown keys anywhere
//! are rejected.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;

use equiflow::alignment::EotOptions;
use equiflow::paths::{ConditionalPath, NoiseSchedule, DEFAULT_SIGMA_MIN};
use equiflow::sampling::{IntegratorSpec, Method};
use equiflow::training::TrainConfig;
use equiflow::vectorfield::ModelConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub paths: PathsSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub mi: MiSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// XYZ file; the synthetic toy set is used when absent.
    pub xyz: Option<PathBuf>,
    pub toy_molecules: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { xyz: None, toy_molecules: 1_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { n_layers: m.n_layers, hidden_dim: m.hidden_dim }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum ScheduleName {
    Linear,
    Cosine,
    Polynomial,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub name: ScheduleName,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub s: Option<f64>,
    pub power: Option<f64>,
    pub precision: Option<f64>,
}

/// A schedule by name (`"cosine"`) or with explicit parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleField {
    Name(ScheduleName),
    Detailed(ScheduleSpec),
}

impl ScheduleField {
    fn build(&self) -> Result<NoiseSchedule> {
        let spec = match self {
            ScheduleField::Name(name) => ScheduleSpec {
                name: name.clone(),
                beta_min: None,
                beta_max: None,
                s: None,
                power: None,
                precision: None,
            },
            ScheduleField::Detailed(s) => s.clone(),
        };
        fn stray(names: &[(&'static str, Option<f64>)]) -> Option<&'static str> {
            names.iter().find(|(_, v)| v.is_some()).map(|(k, _)| *k)
        }
        let sched = match spec.name {
            ScheduleName::Linear => {
                if let Some(k) = stray(&[("s", spec.s), ("power", spec.power), ("precision", spec.precision)]) {
                    bail!("`{k}` does not apply to the linear schedule");
                }
                let NoiseSchedule::Linear { beta_min, beta_max } = NoiseSchedule::LINEAR else { unreachable!() };
                NoiseSchedule::Linear {
                    beta_min: spec.beta_min.unwrap_or(beta_min),
                    beta_max: spec.beta_max.unwrap_or(beta_max),
                }
            }
            ScheduleName::Cosine => {
                if let Some(k) = stray(&[
                    ("beta_min", spec.beta_min),
                    ("beta_max", spec.beta_max),
                    ("power", spec.power),
                    ("precision", spec.precision),
                ]) {
                    bail!("`{k}` does not apply to the cosine schedule");
                }
                let NoiseSchedule::Cosine { s } = NoiseSchedule::COSINE else { unreachable!() };
                NoiseSchedule::Cosine { s: spec.s.unwrap_or(s) }
            }
            ScheduleName::Polynomial => {
                if let Some(k) = stray(&[("beta_min", spec.beta_min), ("beta_max", spec.beta_max), ("s", spec.s)]) {
                    bail!("`{k}` does not apply to the polynomial schedule");
                }
                let NoiseSchedule::Polynomial { power, precision } = NoiseSchedule::POLYNOMIAL else { unreachable!() };
                NoiseSchedule::Polynomial {
                    power: spec.power.unwrap_or(power),
                    precision: spec.precision.unwrap_or(precision),
                }
            }
        };
        sched.validate()?;
        Ok(sched)
    }
}

fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PathSpec {
    Ot {
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
    },
    Eot {
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
    },
    Vp {
        schedule: ScheduleField,
    },
}

impl PathSpec {
    pub fn build(&self) -> Result<ConditionalPath> {
        Ok(match self {
            PathSpec::Ot { sigma_min } => ConditionalPath::ot(*sigma_min)?,
            PathSpec::Eot { sigma_min } => ConditionalPath::eot(*sigma_min)?,
            PathSpec::Vp { schedule } => ConditionalPath::vp(schedule.build()?)?,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub x: PathSpec,
    pub h: PathSpec,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            x: PathSpec::Eot { sigma_min: DEFAULT_SIGMA_MIN },
            h: PathSpec::Vp { schedule: ScheduleField::Name(ScheduleName::Linear) },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub eot_restarts: usize,
    /// Write `checkpoint_step<N>.bin` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_betas: [t.adam_betas.0, t.adam_betas.1],
            adam_eps: t.adam_eps,
            eot_restarts: t.eot_restarts,
            checkpoint_every: 1_000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_samples: usize,
    /// Fixed node count; drawn from the dataset's size histogram when absent.
    pub n_nodes: Option<usize>,
    pub method: String,
    pub n_steps: Option<usize>,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        let d = IntegratorSpec::default();
        Self {
            n_samples: 100,
            n_nodes: None,
            method: "dopri5".into(),
            n_steps: None,
            rtol: d.rtol,
            atol: d.atol,
            max_nfe: d.max_nfe,
        }
    }
}

impl SampleSection {
    pub fn integrator(&self) -> Result<IntegratorSpec> {
        let method = Method::from_name(&self.method)?;
        let mut spec = IntegratorSpec::new(method);
        if let Some(n) = self.n_steps {
            if method == Method::Dopri5 {
                bail!("n_steps does not apply to dopri5; set rtol/atol instead");
            }
            spec.n_steps = n;
        }
        spec.rtol = self.rtol;
        spec.atol = self.atol;
        spec.max_nfe = self.max_nfe;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `"standard"`, `"toy"`, or a path to a bond-table file.
    pub bond_table: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bond_table: "standard".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiSection {
    pub n_points: usize,
    pub n_mc: usize,
    /// Molecules used from the dataset (the first `n`).
    pub max_molecules: usize,
    pub classifier_steps: usize,
    pub classifier_learning_rate: f64,
}

impl Default for MiSection {
    fn default() -> Self {
        let c = equiflow::metrics::ClassifierConfig::default();
        Self {
            n_points: 20,
            n_mc: 4_000,
            max_molecules: 300,
            classifier_steps: c.steps,
            classifier_learning_rate: c.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub restarts: usize,
    pub screening: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let o = EotOptions::default();
        Self { sizes: vec![18, 50, 100, 150], trials: 100, restarts: o.restarts, screening: o.screening }
    }
}

impl RunConfig {
    /// Parse `text` (or `{}`), apply `key.path=value` overrides, then
    /// deserialize. Override values are read as JSON, falling back to a
    /// plain string.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text.unwrap_or("{}")).context("config is not valid JSON")?;
        for item in overrides {
            let (key, raw) = item.split_once('=').with_context(|| format!("override {item:?} is not KEY=VALUE"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).context("invalid config")?;
        cfg.train_config()?.validate()?;
        cfg.sample.integrator()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { n_layers: self.model.n_layers, hidden_dim: self.model.hidden_dim, ..ModelConfig::default() }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            adam_betas: (t.adam_betas[0], t.adam_betas[1]),
            adam_eps: t.adam_eps,
            path_x: self.paths.x.build()?,
            path_h: self.paths.h.build()?,
            eot_restarts: t.eot_restarts,
            seed: self.seed,
            model: self.model_config(),
            ..TrainConfig::default()
        })
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("empty segment in override key {key:?}");
        }
        let Value::Object(map) = node else { bail!("override key {key:?} descends into a non-object") };
        if i == parts.len() - 1 {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_library_defaults() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"sead": 1}"#,
            r#"{"train": {"step": 5}}"#,
            r#"{"paths": {"x": {"kind": "ot", "sigma": 0.01}}}"#,
            r#"{"paths": {"h": {"kind": "vp", "schedule": {"name": "cosine", "beta": 1}}}}"#,
        ] {
            assert!(RunConfig::load(Some(text), &[]).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            Some(r#"{"train": {"steps": 10}}"#),
            &[
                "train.steps=3".into(),
                "paths.h={\"kind\":\"vp\",\"schedule\":\"cosine\"}".into(),
                "sample.method=rk4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train_config().unwrap().path_h, ConditionalPath::Vp { schedule: NoiseSchedule::COSINE });
        assert_eq!(cfg.sample.integrator().unwrap().method, Method::Rk4);
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn schedule_parameters_are_checked() {
        let cfg = RunConfig::load(
            Some(r#"{"paths": {"h": {"kind": "vp", "schedule": {"name": "linear", "beta_max": 10}}}}"#),
            &[],
        )
        .unwrap();
        assert_eq!(
            cfg.train_config().unwrap().path_h,
            ConditionalPath::Vp { schedule: NoiseSchedule::Linear { beta_min: 0.1, beta_max: 10.0 } }
        );
        let bad = r#"{"paths": {"h": {"kind": "vp", "schedule": {"name": "linear", "s": 0.1}}}}"#;
        assert!(RunConfig::load(Some(bad), &[]).is_err());
        assert!(RunConfig::load(Some(r#"{"paths": {"h": {"kind": "eot"}}}"#), &[]).is_err());
        assert!(RunConfig::load(Some(r#"{"train": {"learning_rate": -1}}"#), &[]).is_err());
    }
}
