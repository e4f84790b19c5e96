//! Run configuration: a TOML file with one section per module, overridden by
//! `--section.key value` flags. Flags win over the file; the file wins over
//! built-in defaults. Unknown keys are errors.

use std::path::{Path, PathBuf};

use advlab_core::attacks::{AttackKind, ThreatModel};
use advlab_core::classifier::Architecture;
use advlab_core::data::SyntheticManifoldSpec;
use advlab_core::flow::{FlowConfig, FlowTrainConfig};
use advlab_core::training::TrainConfig;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into every section that draws random numbers.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub synth: SynthSection,
    pub flow: FlowSection,
    pub flow_training: FlowTrainConfig,
    pub classifier: ClassifierSection,
    pub training: TrainConfig,
    pub attack: AttackSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            paths: Paths::default(),
            synth: SynthSection::default(),
            flow: FlowSection::default(),
            flow_training: FlowTrainConfig::default(),
            classifier: ClassifierSection::default(),
            training: TrainConfig::default(),
            attack: AttackSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Input files. Relative paths resolve against the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Training state to resume from (`train`) or to plot (`curves`).
    pub train_state: Option<PathBuf>,
    /// TOML file with `[[attack]]` entries (`name`, `attack`, `threat`).
    pub suite: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthSource {
    #[default]
    Manifold,
    TwoMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub source: SynthSource,
    /// Used when `source = "manifold"`; its `n_samples` is the training size.
    pub manifold: Option<SyntheticManifoldSpec>,
    /// Training size for two-moons.
    pub n_samples: usize,
    pub noise: f64,
    pub eval_samples: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            source: SynthSource::Manifold,
            manifold: None,
            n_samples: 2000,
            noise: 0.1,
            eval_samples: 500,
        }
    }
}

/// Flow architecture; the input shape comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub levels: usize,
    pub steps_per_level: usize,
    pub hidden_width: usize,
    pub dequantization_noise: bool,
    pub logit_eps: Option<f64>,
}

impl Default for FlowSection {
    fn default() -> Self {
        let c = FlowConfig::new([1, 1, 1]);
        Self {
            levels: c.levels,
            steps_per_level: c.steps_per_level,
            hidden_width: c.hidden_width,
            dequantization_noise: c.dequantization_noise,
            logit_eps: c.logit_eps,
        }
    }
}

impl FlowSection {
    pub fn to_config(&self, input_shape: [usize; 3]) -> FlowConfig {
        FlowConfig {
            input_shape,
            levels: self.levels,
            steps_per_level: self.steps_per_level,
            hidden_width: self.hidden_width,
            dequantization_noise: self.dequantization_noise,
            logit_eps: self.logit_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub architecture: Architecture,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::ConvNet {
                widths: [16, 16, 32, 32],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub threat: ThreatModel,
    pub max_samples: Option<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            threat: ThreatModel::pgd(8.0 / 255.0, 2.0 / 255.0, 20),
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Budgets of the default suite, used when no suite file is given.
    pub eps: f64,
    pub eta: f64,
    pub max_samples: Option<usize>,
    /// Also run the corruption sweep.
    pub corruptions: bool,
    pub severities: Vec<u8>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            eps: 8.0 / 255.0,
            eta: 0.02,
            max_samples: None,
            corruptions: false,
            severities: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Contents of a suite file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub attack: Vec<advlab_core::evaluation::SuiteEntry>,
}

/// Parses a flag value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key `{key}`"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// Splits `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            bail!("expected `--key value`, found `{a}`");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_owned(), v.to_owned())),
            None => {
                let v = it.next().with_context(|| format!("flag `--{key}` has no value"))?;
                out.push((key.to_owned(), v.clone()));
            }
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides and propagates the root seed.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.training.seed = cfg.seed;
        cfg.flow_training.seed = cfg.seed;
        if let Some(m) = cfg.synth.manifold.as_mut() {
            m.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn overrides_beat_defaults_and_types_are_inferred() {
        let cfg = RunConfig::resolve(
            None,
            &ov(&[
                ("seed", "7"),
                ("training.epochs", "3"),
                ("training.mode", "ijsat"),
                ("output_dir", "runs/a"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.seed, 7);
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.mode, advlab_core::training::TrainMode::Ijsat);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::resolve(None, &ov(&[("training.epoch", "3")])).is_err());
        assert!(RunConfig::resolve(None, &ov(&[("nonsense", "1")])).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(None, &ov(&[("attack.threat.image_eps", "0.1")])).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flag_pairs_are_split() {
        let args: Vec<String> = ["--a.b", "1", "--c=x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_overrides(&args).unwrap(), ov(&[("a.b", "1"), ("c", "x")]));
        assert!(parse_overrides(&["--a".to_string()]).is_err());
        assert!(parse_overrides(&["a".to_string()]).is_err());
    }
}
