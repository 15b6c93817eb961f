//! Run configuration: one TOML file, validated before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use efcm_core::data::{DatasetKind, PatchSynthConfig, SlideSynthConfig};
use efcm_core::distill::DistillConfig;
use efcm_core::finetune::FinetuneConfig;
use efcm_core::mil::StrategyConfig;
use efcm_core::profiler::FpsProtocol;
use efcm_core::students::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Input dataset directory (read-only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Student checkpoint to start from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mil: Option<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum TeacherSection {
    /// Fixed random convolutional teacher; `seed` defaults to the run seed.
    FrozenRandom {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Precomputed features keyed by sample id.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub kind: DatasetKind,
    #[serde(default)]
    pub patch: PatchSynthConfig,
    #[serde(default)]
    pub slide: SlideSynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSpec {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub protocol: FpsProtocol,
    pub models: Vec<NamedSpec>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            protocol: FpsProtocol::default(),
            models: vec![
                NamedSpec {
                    name: "fpd".into(),
                    spec: ModelSpec::fpd(384, 3),
                },
                NamedSpec {
                    name: "vfd".into(),
                    spec: ModelSpec::vfd(),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run directories to collect; empty means every run under `out`.
    pub runs: Vec<PathBuf>,
}

/// Set `path` (dot-separated) in `table` to `value`, parsed as a TOML value
/// when possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("invalid key path {path:?}");
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("{path}: {k} is not a table"))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parse `path` (or an empty config), apply `key=value` overrides, then
/// validate against the schema.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    propagate_seed(&mut table);
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("config does not match the schema")?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Sections that carry their own `seed` inherit the global one unless they
/// set it explicitly.
fn propagate_seed(table: &mut toml::Table) {
    let Some(seed) = table.get("seed").cloned() else { return };
    for section in SEEDED_SECTIONS {
        if let Some(t) = table.get_mut(section).and_then(|v| v.as_table_mut()) {
            t.entry("seed").or_insert_with(|| seed.clone());
        }
    }
}

const SEEDED_SECTIONS: [&str; 3] = ["distill", "finetune", "mil"];

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        self.model.unwrap_or_else(ModelSpec::desk_fpd)
    }

    pub fn distill_config(&self) -> DistillConfig {
        self.distill.clone().unwrap_or(DistillConfig {
            seed: self.seed,
            ..Default::default()
        })
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        self.finetune.clone().unwrap_or(FinetuneConfig {
            seed: self.seed,
            ..Default::default()
        })
    }

    pub fn mil_config(&self) -> StrategyConfig {
        self.mil.clone().unwrap_or(StrategyConfig {
            seed: self.seed,
            ..Default::default()
        })
    }

    pub fn teacher_section(&self) -> TeacherSection {
        self.teacher.clone().unwrap_or(TeacherSection::FrozenRandom { seed: None })
    }
}

pub fn validate(cfg: &RunConfig) -> Result<()> {
    if let Some(m) = &cfg.model {
        m.validate()?;
    }
    if let Some(s) = &cfg.synth {
        match s.kind {
            DatasetKind::Patch => s.patch.validate()?,
            DatasetKind::Slide => s.slide.validate()?,
        }
    }
    if let Some(d) = &cfg.distill {
        d.validate()?;
    }
    if let Some(f) = &cfg.finetune {
        f.validate()?;
    }
    if let Some(m) = &cfg.mil {
        m.validate()?;
    }
    if let Some(p) = &cfg.profile {
        if p.protocol.timed == 0 {
            bail!("profile.protocol.timed must be ≥ 1");
        }
        for m in &p.models {
            m.spec.validate()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let t: toml::Table = toml::from_str("seed = 1\nbogus = 2").unwrap();
        assert!(toml::Value::Table(t).try_into::<RunConfig>().is_err());
        let t: toml::Table = toml::from_str("[distill]\nlr = 1e-4\nlearning_rate = 3").unwrap();
        assert!(toml::Value::Table(t).try_into::<RunConfig>().is_err());
    }

    #[test]
    fn overrides_create_and_replace_keys() {
        let mut t: toml::Table = toml::from_str("[distill]\ntotal_steps = 10").unwrap();
        apply_override(&mut t, "distill.total_steps", "20").unwrap();
        apply_override(&mut t, "mil.strategy", "retrain").unwrap();
        apply_override(&mut t, "out", "/tmp/x").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.distill.unwrap().total_steps, 20);
        assert_eq!(cfg.mil.unwrap().strategy, efcm_core::mil::Strategy::Retrain);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn global_seed_reaches_sections_without_one() {
        let mut t: toml::Table = toml::from_str("seed = 9\n[distill]\n[mil]\nseed = 4").unwrap();
        propagate_seed(&mut t);
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.distill_config().seed, 9);
        assert_eq!(cfg.mil_config().seed, 4);
        assert_eq!(cfg.finetune_config().seed, 9);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig {
            seed: 3,
            out: "o".into(),
            dataset: Some("d".into()),
            checkpoint: None,
            model: Some(ModelSpec::desk_fpd()),
            teacher: Some(TeacherSection::FrozenRandom { seed: None }),
            synth: None,
            distill: Some(DistillConfig::default()),
            finetune: None,
            mil: Some(StrategyConfig::default()),
            profile: Some(ProfileSection::default()),
            report: None,
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
