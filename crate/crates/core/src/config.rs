//! Run configuration: a sectioned TOML document (`model`, `daq`, `eds`,
//! `train`, `eval`) with environment overrides, plus the train/evaluate
//! pipeline driven by it.
//!
//! Any key can be overridden by `DAQTRACK_<SECTION>_<KEY>`, e.g.
//! `DAQTRACK_TRAIN_STEPS=200` or `DAQTRACK_EDS_ES_THRESHOLD=0.5`. Values are
//! parsed as TOML values, falling back to a plain string.

use serde::{Deserialize, Serialize};

use crate::daq::{DaqVariant, DisFeat, DisPos, EmgSource, EmgUsage};
use crate::eds::{DsMode, EdsConfig, EsMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, transition_gap, EvalConfig, EvalReport, GapReport};
use crate::matching::LossConfig;
use crate::scenario::{generate_scenario, NoiseSpec, Scenario, ScenarioSpec};
use crate::tracker::{Engine, EngineConfig, EngineKind, LifecycleConfig};
use crate::train::{train, AdamWConfig, TraceRow, TrainConfig};

pub const ENV_PREFIX: &str = "DAQTRACK_";
pub const SECTIONS: [&str; 5] = ["model", "daq", "eds", "train", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: EngineKind,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub accept_threshold: f64,
    pub dup_iou: f64,
    pub grace_frames: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let lc = LifecycleConfig::default();
        Self {
            kind: EngineKind::Daq,
            dim: 64,
            heads: 4,
            layers: 3,
            num_classes: 4,
            accept_threshold: lc.accept_threshold,
            dup_iou: lc.dup_iou,
            grace_frames: lc.grace_frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaqSection {
    pub top_k: usize,
    pub num_learnable: usize,
    pub emg_source: EmgSource,
    pub emg_usage: EmgUsage,
    pub dis_feat: DisFeat,
    pub dis_pos: DisPos,
}

impl Default for DaqSection {
    fn default() -> Self {
        let v = DaqVariant::default();
        Self {
            top_k: 10,
            num_learnable: 2,
            emg_source: v.emg_source,
            emg_usage: v.emg_usage,
            dis_feat: v.dis_feat,
            dis_pos: v.dis_pos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdsSection {
    pub enabled: bool,
    pub es_threshold: f64,
    /// Probability of dropping each tracked query; used instead of the
    /// score threshold when set.
    pub es_uniform_drop: Option<f64>,
    pub ds_mode: DsMode,
    pub ds_rate: f64,
}

impl Default for EdsSection {
    fn default() -> Self {
        let d = EdsConfig::default();
        Self {
            enabled: true,
            es_threshold: d.es_threshold,
            es_uniform_drop: None,
            ds_mode: d.ds_mode,
            ds_rate: d.ds_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: String,
    /// Number of generated training scenarios.
    pub pool: usize,
    /// Seed of the first training scenario; scenario `i` uses `scenario_seed + i`.
    pub scenario_seed: u64,
    pub steps: usize,
    pub clip_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Optimizer step after which the learning rate drops tenfold.
    pub decay_step: Option<u64>,
    pub lambda_cls: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub bg_weight: f64,
    pub assign_min_iou: f64,
    pub noise: NoiseSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LossConfig::default();
        Self {
            preset: "dense-ed".into(),
            pool: 512,
            scenario_seed: 1_000,
            steps: 1_500,
            clip_len: t.clip_len,
            lr: 1e-3,
            weight_decay: t.optimizer.weight_decay,
            grad_clip: t.optimizer.grad_clip,
            decay_step: Some(1_050),
            lambda_cls: l.lambda_cls,
            lambda_dice: l.lambda_dice,
            lambda_bce: l.lambda_bce,
            bg_weight: t.bg_weight,
            assign_min_iou: t.assign_min_iou,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub preset: String,
    pub count: usize,
    pub scenario_seed: u64,
    pub iou_thresh: f64,
    pub frame_tol: usize,
    pub noise: NoiseSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            preset: "dense-ed".into(),
            count: 48,
            scenario_seed: 900_000,
            iou_thresh: e.iou_thresh,
            frame_tol: e.frame_tol,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub daq: DaqSection,
    pub eds: EdsSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Parses an override value as a TOML value, or keeps it as a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `section.key = value` in a raw config table.
pub fn set_key(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let Some((section, key)) = dotted.split_once('.') else {
        return Err(Error::Config(format!("override `{dotted}` must look like section.key")));
    };
    if !SECTIONS.contains(&section) {
        return Err(Error::Config(format!(
            "unknown config section `{section}` (expected one of {})",
            SECTIONS.join(", ")
        )));
    }
    let sec = table
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = sec else {
        return Err(Error::Config(format!("`{section}` must be a table")));
    };
    let mut cursor = sec;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let next = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(next) = next else {
            return Err(Error::Config(format!("`{section}.{p}` is not a table")));
        };
        cursor = next;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Applies `DAQTRACK_<SECTION>_<KEY>` variables from `vars`.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut found: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
        .collect();
    found.sort();
    for (rest, v) in found {
        let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
            return Err(Error::Config(format!("environment override {ENV_PREFIX}{} names no section", rest.to_ascii_uppercase())));
        };
        let key = &rest[section.len() + 1..];
        set_key(table, &format!("{section}.{key}"), &v)?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config document, then applies `overrides` (`section.key`, value)
    /// and the process environment.
    pub fn load(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        apply_env(&mut table, std::env::vars())?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let spec = ScenarioSpec::preset(&self.train.preset)?;
        ScenarioSpec::preset(&self.eval.preset)?;
        if spec.dim != self.model.dim || spec.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "model.dim/num_classes ({}, {}) must match preset `{}` ({}, {})",
                self.model.dim, self.model.num_classes, self.train.preset, spec.dim, spec.num_classes
            )));
        }
        if self.train.pool == 0 || self.eval.count == 0 {
            return Err(Error::Config("train.pool and eval.count must be positive".into()));
        }
        self.engine_config(self.model.kind).validate()?;
        self.train_config().validate()
    }

    pub fn engine_config(&self, kind: EngineKind) -> EngineConfig {
        let m = &self.model;
        let mut c = EngineConfig::new(kind, m.dim, m.num_classes);
        c.heads = m.heads;
        c.layers = m.layers;
        c.top_k = self.daq.top_k;
        c.num_learnable = self.daq.num_learnable;
        c.variant = DaqVariant {
            emg_source: self.daq.emg_source,
            emg_usage: self.daq.emg_usage,
            dis_feat: self.daq.dis_feat,
            dis_pos: self.daq.dis_pos,
        };
        c.lifecycle = LifecycleConfig {
            accept_threshold: m.accept_threshold,
            dup_iou: m.dup_iou,
            grace_frames: m.grace_frames,
        };
        c
    }

    pub fn eds_config(&self) -> EdsConfig {
        let e = &self.eds;
        if !e.enabled {
            return EdsConfig::disabled();
        }
        EdsConfig {
            es_threshold: e.es_threshold,
            es_mode: e.es_uniform_drop.map_or(EsMode::Threshold, EsMode::UniformDrop),
            ds_mode: e.ds_mode,
            ds_rate: e.ds_rate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            clip_len: t.clip_len,
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                grad_clip: t.grad_clip,
                decay_step: t.decay_step,
                ..AdamWConfig::default()
            },
            loss: LossConfig {
                lambda_cls: t.lambda_cls,
                lambda_dice: t.lambda_dice,
                lambda_bce: t.lambda_bce,
            },
            eds: self.eds_config(),
            noise: t.noise,
            bg_weight: t.bg_weight,
            assign_min_iou: t.assign_min_iou,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresh: self.eval.iou_thresh,
            frame_tol: self.eval.frame_tol,
        }
    }

    pub fn train_scenarios(&self) -> Result<Vec<Scenario>> {
        generate_pool(&self.train.preset, self.train.scenario_seed, self.train.pool)
    }

    pub fn eval_scenarios(&self) -> Result<Vec<Scenario>> {
        generate_pool(&self.eval.preset, self.eval.scenario_seed, self.eval.count)
    }
}

pub fn generate_pool(preset: &str, first_seed: u64, count: usize) -> Result<Vec<Scenario>> {
    let spec = ScenarioSpec::preset(preset)?;
    (0..count as u64)
        .map(|i| generate_scenario(&spec, first_seed + i))
        .collect()
}

/// A trained engine with its trace.
pub struct TrainedRun {
    pub engine: Engine,
    pub trace: Vec<TraceRow>,
}

/// Trains an engine of `kind` from `cfg` with run seed `seed`.
pub fn train_engine(cfg: &RunConfig, kind: EngineKind, seed: u64, scenarios: &[Scenario]) -> Result<TrainedRun> {
    let mut engine = Engine::new(cfg.engine_config(kind), seed)?;
    let trace = train(&mut engine, scenarios, &cfg.train_config(), seed)?;
    Ok(TrainedRun { engine, trace })
}

/// Evaluates `engine` on `scenarios` with the config's eval settings.
pub fn eval_engine(cfg: &RunConfig, engine: &Engine, scenarios: &[Scenario], seed: u64) -> Result<EvalReport> {
    evaluate(engine, scenarios, &cfg.eval.noise, &cfg.eval_config(), seed)
}

pub fn gap_engine(cfg: &RunConfig, engine: &Engine, scenarios: &[Scenario], seed: u64) -> Result<GapReport> {
    transition_gap(engine, scenarios, &cfg.eval.noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let table: toml::Table = "".parse().unwrap();
        assert_eq!(RunConfig::from_table(table).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_env() {
        let mut table: toml::Table = "[train]\nsteps = 10\n".parse().unwrap();
        set_key(&mut table, "eds.es_threshold", "0.5").unwrap();
        apply_env(
            &mut table,
            [
                ("DAQTRACK_TRAIN_LR".to_string(), "0.01".to_string()),
                ("DAQTRACK_MODEL_KIND".to_string(), "baseline".to_string()),
                ("OTHER".to_string(), "x".to_string()),
            ],
        )
        .unwrap();
        let cfg = RunConfig::from_table(table).unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.eds.es_threshold, 0.5);
        assert_eq!(cfg.model.kind, EngineKind::Baseline);
    }

    #[test]
    fn bad_keys_are_config_errors() {
        let mut table = toml::Table::new();
        assert!(set_key(&mut table, "nosuch.key", "1").is_err());
        set_key(&mut table, "train.nosuch", "1").unwrap();
        assert!(matches!(RunConfig::from_table(table), Err(Error::Config(_))));
        let mut table = toml::Table::new();
        set_key(&mut table, "model.dim", "32").unwrap();
        assert!(RunConfig::from_table(table).unwrap_err().is_config());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::load(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
