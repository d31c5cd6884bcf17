//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` and trailing `# ...` are comments. Omitted keys
//! take defaults, unknown or repeated keys are rejected, and
//! [`ExperimentConfig::to_text`] writes every resolved key back out in a form
//! that parses to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Activation;
use crate::data::{DatasetName, DatasetSpec};
use crate::diagnostics::{DEFAULT_EPS_FD, DEFAULT_STAB_EPS};
use crate::model::ModelConfig;
use crate::objectives::{EpsDist, IsoNorm, L1Reduction, LossConfig};
use crate::sampler::Solver;
use crate::trainer::TrainRunConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given more than once")]
    DuplicateKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Final-sample settings used after training.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub n: usize,
    pub nfe: usize,
    pub solver: Solver,
    pub cfg_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsSettings {
    pub nfe_list: Vec<usize>,
    pub paths: usize,
    pub stab_eps: f64,
    pub eps_fd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub run: TrainRunConfig,
    pub sampler: SamplerSettings,
    pub diagnostics: DiagnosticsSettings,
}

/// Desk-scale learning rate; see the README for the schedule choices.
pub const DESK_LR: f64 = 2e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::new(DatasetName::EightGaussians);
        Self {
            run_id: "run".into(),
            output_dir: PathBuf::from("runs"),
            model: ModelConfig { data_dim: dataset.data_dim(), ..ModelConfig::default() },
            dataset,
            loss: LossConfig::default(),
            run: TrainRunConfig { lr: DESK_LR, ..TrainRunConfig::default() },
            sampler: SamplerSettings { n: 2048, nfe: 4, solver: Solver::Euler, cfg_scale: 1.0 },
            diagnostics: DiagnosticsSettings {
                nfe_list: vec![1, 2, 4, 32],
                paths: 256,
                stab_eps: DEFAULT_STAB_EPS,
                eps_fd: DEFAULT_EPS_FD,
            },
        }
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Silu => "silu",
    }
}

fn iso_norm_name(n: IsoNorm) -> &'static str {
    match n {
        IsoNorm::L1Normalized => "l1-normalized",
        IsoNorm::L2Squared => "l2-squared",
    }
}

fn reduction_name(r: L1Reduction) -> &'static str {
    match r {
        L1Reduction::Mean => "mean",
        L1Reduction::Sum => "sum",
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.0.remove(key) {
            *slot = v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.into(),
                value: v.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<(), ConfigError> {
        if let Some(v) = self.0.remove(key) {
            *slot = parse(&v).ok_or_else(|| ConfigError::BadValue {
                key: key.into(),
                value: v.clone(),
                reason: "unrecognized value".into(),
            })?;
        }
        Ok(())
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(k.to_string()));
            }
        }
        let mut e = Entries(map);
        let mut c = Self::default();

        e.take("run_id", &mut c.run_id)?;
        e.take("output_dir", &mut c.output_dir)?;

        let mut name = c.dataset.name.to_string();
        e.take("dataset", &mut name)?;
        c.dataset.name = name.parse().map_err(|err: crate::data::DataError| ConfigError::BadValue {
            key: "dataset".into(),
            value: name.clone(),
            reason: err.to_string(),
        })?;
        e.take("dataset_scale", &mut c.dataset.scale)?;
        e.take("dataset_noise", &mut c.dataset.noise)?;

        let m = &mut c.model;
        m.data_dim = c.dataset.data_dim();
        e.take("hidden_dim", &mut m.hidden_dim)?;
        e.take("depth", &mut m.depth)?;
        e.take("time_embed_dim", &mut m.time_embed_dim)?;
        let mut conditional = false;
        e.take("conditional", &mut conditional)?;
        m.num_classes = if conditional { c.dataset.num_classes() } else { 0 };
        e.take_with("activation", &mut m.activation, |s| match s {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            _ => None,
        })?;

        let l = &mut c.loss;
        e.take("lambda_fm", &mut l.lambda_fm)?;
        e.take("lambda_iso", &mut l.lambda_iso)?;
        e.take("alpha", &mut l.alpha)?;
        e.take("zeta", &mut l.zeta)?;
        e.take("p_iso", &mut l.p_iso)?;
        e.take_with("iso_norm", &mut l.iso_norm, |s| match s {
            "l1-normalized" => Some(IsoNorm::L1Normalized),
            "l2-squared" => Some(IsoNorm::L2Squared),
            _ => None,
        })?;
        e.take_with("l1_reduction", &mut l.l1_reduction, |s| match s {
            "mean" => Some(L1Reduction::Mean),
            "sum" => Some(L1Reduction::Sum),
            _ => None,
        })?;
        let mut dist = "log-normal".to_string();
        e.take("eps_dist", &mut dist)?;
        l.eps_dist = match dist.as_str() {
            "log-normal" => {
                let (mut median, mut log_std) = (0.01, 0.5);
                e.take("eps_median", &mut median)?;
                e.take("eps_log_std", &mut log_std)?;
                EpsDist::LogNormal { median, log_std }
            }
            "beta" => {
                let (mut a, mut b, mut scale) = (2.0, 50.0, 0.5);
                e.take("eps_beta_a", &mut a)?;
                e.take("eps_beta_b", &mut b)?;
                e.take("eps_beta_scale", &mut scale)?;
                EpsDist::Beta { a, b, scale }
            }
            _ => {
                return Err(ConfigError::BadValue {
                    key: "eps_dist".into(),
                    value: dist,
                    reason: "expected log-normal or beta".into(),
                })
            }
        };
        e.take("eps_min", &mut l.eps_min)?;
        e.take("eps_max", &mut l.eps_max)?;
        e.take("t_mu", &mut l.t_mu)?;
        e.take("t_sigma", &mut l.t_sigma)?;

        let r = &mut c.run;
        e.take("epochs", &mut r.epochs)?;
        e.take("steps_per_epoch", &mut r.steps_per_epoch)?;
        e.take("batch_size", &mut r.batch_size)?;
        e.take("t_max", &mut r.t_max)?;
        e.take("lr", &mut r.lr)?;
        e.take("weight_decay", &mut r.weight_decay)?;
        e.take("eta_min_ratio", &mut r.eta_min_ratio)?;
        e.take("ema_decay", &mut r.ema_decay)?;
        e.take("clip_norm", &mut r.clip_norm)?;
        e.take("ot_enabled", &mut r.ot_enabled)?;
        e.take("label_drop_prob", &mut r.label_drop_prob)?;
        e.take("seed", &mut r.seed)?;
        e.take("eval_every", &mut r.eval_every)?;
        e.take("eval_samples", &mut r.eval_samples)?;
        e.take("eval_projections", &mut r.eval_projections)?;
        e.take("curvature_paths", &mut r.curvature_paths)?;
        e.take("curvature_nfe", &mut r.curvature_nfe)?;
        e.take("eval_seed", &mut r.eval_seed)?;
        e.take("keep_checkpoints", &mut r.keep_checkpoints)?;

        let s = &mut c.sampler;
        e.take("sample_n", &mut s.n)?;
        e.take("sample_nfe", &mut s.nfe)?;
        e.take("solver", &mut s.solver)?;
        e.take("cfg_scale", &mut s.cfg_scale)?;

        let d = &mut c.diagnostics;
        e.take_with("diag_nfe_list", &mut d.nfe_list, parse_list)?;
        e.take("diag_paths", &mut d.paths)?;
        e.take("stab_eps", &mut d.stab_eps)?;
        e.take("eps_fd", &mut d.eps_fd)?;

        if let Some(k) = e.0.keys().next() {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(ConfigError::Invalid("run_id must be a non-empty plain name".into()));
        }
        self.dataset.validate().map_err(|e| inv(&e))?;
        self.model.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.run.validate().map_err(|e| inv(&e))?;
        if self.sampler.n == 0 || self.sampler.nfe == 0 {
            return Err(ConfigError::Invalid("sample_n and sample_nfe must be positive".into()));
        }
        if self.sampler.solver == Solver::Heun && self.sampler.nfe % 2 == 1 {
            return Err(ConfigError::Invalid("heun needs an even sample_nfe".into()));
        }
        if self.sampler.cfg_scale != 1.0 && !self.model.is_conditional() {
            return Err(ConfigError::Invalid("cfg_scale needs conditional = true".into()));
        }
        let d = &self.diagnostics;
        if d.nfe_list.is_empty() || d.nfe_list.contains(&0) || d.paths == 0 || !(d.stab_eps > 0.0 && d.eps_fd > 0.0) {
            return Err(ConfigError::Invalid("diagnostics settings must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, l, r, s, d) = (&self.model, &self.loss, &self.run, &self.sampler, &self.diagnostics);
        let mut out: Vec<(&'static str, String)> = vec![
            ("run_id", self.run_id.clone()),
            ("output_dir", self.output_dir.display().to_string()),
            ("dataset", self.dataset.name.to_string()),
            ("dataset_scale", self.dataset.scale.to_string()),
            ("dataset_noise", self.dataset.noise.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("time_embed_dim", m.time_embed_dim.to_string()),
            ("conditional", m.is_conditional().to_string()),
            ("activation", activation_name(m.activation).into()),
            ("lambda_fm", l.lambda_fm.to_string()),
            ("lambda_iso", l.lambda_iso.to_string()),
            ("alpha", l.alpha.to_string()),
            ("zeta", l.zeta.to_string()),
            ("p_iso", l.p_iso.to_string()),
            ("iso_norm", iso_norm_name(l.iso_norm).into()),
            ("l1_reduction", reduction_name(l.l1_reduction).into()),
        ];
        match l.eps_dist {
            EpsDist::LogNormal { median, log_std } => out.extend([
                ("eps_dist", "log-normal".to_string()),
                ("eps_median", median.to_string()),
                ("eps_log_std", log_std.to_string()),
            ]),
            EpsDist::Beta { a, b, scale } => out.extend([
                ("eps_dist", "beta".to_string()),
                ("eps_beta_a", a.to_string()),
                ("eps_beta_b", b.to_string()),
                ("eps_beta_scale", scale.to_string()),
            ]),
        }
        out.extend([
            ("eps_min", l.eps_min.to_string()),
            ("eps_max", l.eps_max.to_string()),
            ("t_mu", l.t_mu.to_string()),
            ("t_sigma", l.t_sigma.to_string()),
            ("epochs", r.epochs.to_string()),
            ("steps_per_epoch", r.steps_per_epoch.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("t_max", r.t_max.to_string()),
            ("lr", r.lr.to_string()),
            ("weight_decay", r.weight_decay.to_string()),
            ("eta_min_ratio", r.eta_min_ratio.to_string()),
            ("ema_decay", r.ema_decay.to_string()),
            ("clip_norm", r.clip_norm.to_string()),
            ("ot_enabled", r.ot_enabled.to_string()),
            ("label_drop_prob", r.label_drop_prob.to_string()),
            ("seed", r.seed.to_string()),
            ("eval_every", r.eval_every.to_string()),
            ("eval_samples", r.eval_samples.to_string()),
            ("eval_projections", r.eval_projections.to_string()),
            ("curvature_paths", r.curvature_paths.to_string()),
            ("curvature_nfe", r.curvature_nfe.to_string()),
            ("eval_seed", r.eval_seed.to_string()),
            ("keep_checkpoints", r.keep_checkpoints.to_string()),
            ("sample_n", s.n.to_string()),
            ("sample_nfe", s.nfe.to_string()),
            ("solver", s.solver.to_string()),
            ("cfg_scale", s.cfg_scale.to_string()),
            ("diag_nfe_list", join(&d.nfe_list)),
            ("diag_paths", d.paths.to_string()),
            ("stab_eps", d.stab_eps.to_string()),
            ("eps_fd", d.eps_fd.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let text = "# baseline\nrun_id = fm   # trailing\nlambda_iso = 0\np_iso = 0.0\n\nconditional = true\ndiag_nfe_list = 1, 2,32\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.run_id, "fm");
        assert_eq!((c.loss.lambda_iso, c.loss.p_iso), (0.0, 0.0));
        assert_eq!(c.model.num_classes, 8);
        assert_eq!(c.diagnostics.nfe_list, vec![1, 2, 32]);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(ExperimentConfig::parse("learning_rate = 1").unwrap_err(), ConfigError::UnknownKey("learning_rate".into()));
        assert!(matches!(ExperimentConfig::parse("lr = 1\nlr = 2"), Err(ConfigError::DuplicateKey(_))));
        assert!(matches!(ExperimentConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("lr = fast"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("dataset = mnist"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("p_iso = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("cfg_scale = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("eps_beta_a = 2"), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn beta_and_one_dim_round_trip() {
        let text = "dataset = gmm-1d\neps_dist = beta\neps_beta_a = 3\niso_norm = l2-squared\nactivation = tanh\nsolver = heun\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.model.data_dim, 1);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn resolved_echo_round_trips(
            lr in 1e-6f64..1.0,
            lambda in 0.0f64..10.0,
            zeta in 1e-9f64..1.0,
            seed in any::<u64>(),
            ot in any::<bool>(),
            cond in any::<bool>(),
            hidden in 1usize..128,
        ) {
            let text = format!("lr = {lr}\nlambda_iso = {lambda}\nzeta = {zeta}\nseed = {seed}\not_enabled = {ot}\nconditional = {cond}\nhidden_dim = {hidden}\n");
            let c = ExperimentConfig::parse(&text).unwrap();
            let echoed = c.to_text();
            let again = ExperimentConfig::parse(&echoed).unwrap();
            prop_assert_eq!(&again, &c);
            prop_assert_eq!(again.to_text(), echoed);
        }
    }
}
