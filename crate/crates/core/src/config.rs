//! Experiment configuration.
//!
//! A configuration is resolved in three layers: a built-in profile
//! (`default` or `smoke`), an optional JSON file, and `--key value` style
//! overrides. Every leaf remembers which layer set it. Unknown keys are
//! rejected and every value is range-checked before any work starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrastive::PretrainConfig;
use crate::denoiser::{Backbone, DenoiserConfig};
use crate::diffusion::{LdmConfig, ScheduleDescriptor, ScheduleMode};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ablation::{AblationGrid, Variant};
use crate::eval::probe::ProbeConfig;
use crate::sampler::SamplerConfig;
use crate::synthdata::{DataConfig, Waveform};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Short override names and the keys they stand for.
pub const KEY_ALIASES: &[(&str, &str)] = &[
    ("beta_p", "ldm.beta_p"),
    ("d", "model.latent_dim"),
    ("T", "diffusion.steps"),
    ("N", "prior.n"),
    ("resolution", "data.resolution"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub face_widths: Vec<usize>,
    pub speech_widths: Vec<usize>,
    pub attention_after: usize,
    pub attention_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            latent_dim: e.latent_dim,
            face_widths: e.face_widths,
            speech_widths: e.speech_widths,
            attention_after: e.attention_after,
            attention_reduction: e.attention_reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Faces averaged into the prior.
    pub n: usize,
    /// Subset sizes of the convergence table.
    pub convergence_ns: Vec<usize>,
    pub convergence_repetitions: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            convergence_ns: vec![50, 100, 200, 400, 800],
            convergence_repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub mode: ScheduleMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            mode: ScheduleMode::VariancePreserving,
        }
    }
}

/// Denoiser settings; the latent width comes from [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSettings {
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub backbone: Backbone,
    pub grid: Option<[usize; 2]>,
}

impl Default for DenoiserSettings {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            width: d.width,
            heads: d.heads,
            time_dim: d.time_dim,
            backbone: d.backbone,
            grid: d.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Test identities used as generation conditions.
    pub conditions: usize,
    /// Leading conditions that also enter the diversity score.
    pub diversity_conditions: usize,
    /// Rows of the contact sheet.
    pub contact_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            conditions: 100,
            diversity_conditions: 20,
            contact_rows: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub beta_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Wall-clock budget; the report is marked incomplete when exceeded.
    pub max_seconds: Option<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let g = AblationGrid::default();
        Self {
            variants: g.variants,
            beta_sweep: g.beta_sweep,
            seeds: g.seeds,
            max_seconds: None,
        }
    }
}

impl AblationConfig {
    pub fn grid(&self) -> AblationGrid {
        AblationGrid {
            variants: self.variants.clone(),
            beta_sweep: self.beta_sweep.clone(),
            seeds: self.seeds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Global seed; every training and sampling stream is derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub prior: PriorConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserSettings,
    pub ldm: LdmConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            workers: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            prior: PriorConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserSettings::default(),
            ldm: LdmConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small CPU profile: d = 32, T = 100, 32 px faces, 1 s clips.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data = DataConfig {
            train: 256,
            val: 64,
            test: 64,
            resolution: 32,
            duration: 1.0,
            ..DataConfig::default()
        };
        c.model = ModelConfig {
            latent_dim: 32,
            face_widths: vec![16, 32, 64, 64],
            speech_widths: vec![16, 32, 32, 64, 64],
            attention_after: 3,
            attention_reduction: 8,
        };
        c.pretrain = PretrainConfig {
            steps: 1500,
            lr_face: 1e-3,
            eval_every: 500,
            ..PretrainConfig::default()
        };
        c.prior.n = 200;
        c.diffusion.steps = 100;
        c.denoiser = DenoiserSettings {
            width: 32,
            time_dim: 32,
            ..DenoiserSettings::default()
        };
        c.ldm = LdmConfig {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            ..LdmConfig::default()
        };
        c.eval.conditions = 64;
        c.ablation.max_seconds = Some(7200.0);
        c
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Default => Self::default(),
            Profile::Smoke => Self::smoke(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let len = Waveform::expected_len(self.data.sample_rate, self.data.duration);
        EncoderConfig {
            latent_dim: self.model.latent_dim,
            resolution: self.data.resolution,
            face_widths: self.model.face_widths.clone(),
            speech_widths: self.model.speech_widths.clone(),
            attention_after: self.model.attention_after,
            attention_reduction: self.model.attention_reduction,
            spec_bins: self.data.stft.bins(),
            spec_frames: self.data.stft.frames(len),
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: self.model.latent_dim,
            width: self.denoiser.width,
            heads: self.denoiser.heads,
            time_dim: self.denoiser.time_dim,
            backbone: self.denoiser.backbone,
            grid: self.denoiser.grid,
        }
    }

    pub fn schedule(&self) -> ScheduleDescriptor {
        ScheduleDescriptor::standard(self.diffusion.steps, self.diffusion.mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("must be {CONFIG_SCHEMA_VERSION}"),
            ));
        }
        self.data.validate()?;
        if self.data.train < 2 || self.data.test < 1 {
            return Err(Error::validation("data.train", "needs at least 2 train and 1 test identity"));
        }
        self.encoder_config().validate()?;
        self.pretrain.validate()?;
        if self.pretrain.batch_size > self.data.train {
            return Err(Error::validation("pretrain.batch_size", "must not exceed data.train"));
        }
        if self.prior.n == 0 {
            return Err(Error::validation("prior.n", "must be >= 1"));
        }
        let ns = &self.prior.convergence_ns;
        if ns.len() < 2 || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "prior.convergence_ns",
                "needs at least two positive, strictly increasing sizes",
            ));
        }
        if self.prior.convergence_repetitions == 0 {
            return Err(Error::validation("prior.convergence_repetitions", "must be >= 1"));
        }
        if self.diffusion.steps == 0 {
            return Err(Error::validation("diffusion.steps", "must be >= 1"));
        }
        self.schedule()
            .validate()
            .map_err(|e| Error::validation("diffusion.steps", e.to_string()))?;
        self.denoiser_config().validate()?;
        self.ldm.validate()?;
        self.sampler.validate(self.diffusion.steps)?;
        self.eval.probe.validate().map_err(|e| nest("eval", e))?;
        if self.eval.conditions == 0 || self.eval.conditions > self.data.test {
            return Err(Error::validation("eval.conditions", "must be in [1, data.test]"));
        }
        if self.eval.diversity_conditions > self.eval.conditions {
            return Err(Error::validation("eval.diversity_conditions", "must not exceed eval.conditions"));
        }
        if self.eval.contact_rows == 0 {
            return Err(Error::validation("eval.contact_rows", "must be >= 1"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::validation("ablation.seeds", "must not be empty"));
        }
        if self.ablation.beta_sweep.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::validation("ablation.beta_sweep", "every weight must be >= 0"));
        }
        if let Some(m) = self.ablation.max_seconds {
            if !(m > 0.0) {
                return Err(Error::validation("ablation.max_seconds", "must be positive"));
            }
        }
        Ok(())
    }
}

fn nest(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { key, constraint } => Error::Validation {
            key: format!("{prefix}.{key}"),
            constraint,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Default,
    Smoke,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "smoke" => Ok(Profile::Smoke),
            other => Err(Error::validation("profile", format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Default => "default",
            Profile::Smoke => "smoke",
        })
    }
}

/// Layer that set a configuration value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    Default,
    Profile,
    File,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub profile: Profile,
    pub config: ExperimentConfig,
    /// Dotted leaf key to the layer that set it.
    pub sources: BTreeMap<String, ValueSource>,
}

/// Expands an alias to its full dotted key.
pub fn canonical_key(key: &str) -> &str {
    KEY_ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, full)| full)
}

/// Every dotted key (sections and leaves) and alias an override may name.
pub fn config_keys() -> std::collections::BTreeSet<String> {
    fn walk(v: &Value, prefix: &str, out: &mut std::collections::BTreeSet<String>) {
        if let Value::Object(m) = v {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk(child, &key, out);
                out.insert(key);
            }
        }
    }
    let mut out = std::collections::BTreeSet::new();
    walk(
        &serde_json::to_value(ExperimentConfig::default()).expect("config serializes"),
        "",
        &mut out,
    );
    out.extend(KEY_ALIASES.iter().map(|(a, _)| a.to_string()));
    out
}

/// Parses an override value as JSON, falling back to a bare string.
pub fn parse_override_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(child, &key, out);
            }
        }
        _ if !prefix.is_empty() => out.push((prefix.to_string(), v.clone())),
        _ => {}
    }
}

fn lookup_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(root, |v, part| v.as_object_mut()?.get_mut(part))
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: &Map<String, Value>, prefix: &str) -> Result<()> {
    let obj = base.as_object_mut().expect("merge target is an object");
    for (k, v) in patch {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = obj
            .get_mut(k)
            .ok_or_else(|| Error::validation(&key, "unknown key"))?;
        match (slot.is_object(), v) {
            (true, Value::Object(inner)) => merge(slot, inner, &key)?,
            (true, _) => return Err(Error::validation(&key, "expected an object")),
            (false, _) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn decode(value: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::validation(&key, e.into_inner().to_string())
    })
}

/// Resolves profile defaults, then `file`, then `overrides` (later wins),
/// and validates the result.
pub fn resolve_config(profile: Profile, file: Option<&Path>, overrides: &[(String, String)]) -> Result<ResolvedConfig> {
    let defaults = serde_json::to_value(ExperimentConfig::default())?;
    let mut merged = serde_json::to_value(ExperimentConfig::profile(profile))?;

    let mut base_leaves = Vec::new();
    leaves(&defaults, "", &mut base_leaves);
    let mut profile_leaves = Vec::new();
    leaves(&merged, "", &mut profile_leaves);
    let mut sources: BTreeMap<String, ValueSource> = base_leaves
        .iter()
        .zip(&profile_leaves)
        .map(|((k, a), (_, b))| {
            let src = if a == b { ValueSource::Default } else { ValueSource::Profile };
            (k.clone(), src)
        })
        .collect();

    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?
        };
        let Value::Object(patch) = parsed else {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        };
        merge(&mut merged, &patch, "")?;
        let mut set = Vec::new();
        leaves(&Value::Object(patch), "", &mut set);
        mark(&mut sources, set.into_iter().map(|(k, _)| k), ValueSource::File);
    }

    for (raw, text) in overrides {
        let key = canonical_key(raw.trim_start_matches("--"));
        let slot = lookup_mut(&mut merged, key).ok_or_else(|| Error::validation(key, "unknown key"))?;
        let value = parse_override_value(text);
        if slot.is_object() && !value.is_object() {
            return Err(Error::validation(key, "expected an object"));
        }
        *slot = value;
        let mut set = Vec::new();
        leaves(slot, key, &mut set);
        mark(&mut sources, set.into_iter().map(|(k, _)| k), ValueSource::Override);
    }

    let config = decode(merged)?;
    config.validate()?;
    Ok(ResolvedConfig {
        profile,
        config,
        sources,
    })
}

/// Marks `keys` and, for keys that replaced a whole subtree, every leaf
/// below them.
fn mark(sources: &mut BTreeMap<String, ValueSource>, keys: impl Iterator<Item = String>, src: ValueSource) {
    for k in keys {
        let below = format!("{k}.");
        let mut hit = false;
        for (leaf, s) in sources.iter_mut() {
            if *leaf == k || leaf.starts_with(&below) {
                *s = src;
                hit = true;
            }
        }
        if !hit {
            sources.insert(k, src);
        }
    }
}
