//! The configuration file shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use saecv_core::cv::CvConfig;
use saecv_core::models::{ModelConfig, ModelSpec};
use saecv_core::sim::{PairConfig, ScenarioConfig};
use saecv_core::survey::CsvColumns;
use saecv_core::WeightMode;
use serde::Deserialize;

/// Keys that live at the top level of the file rather than in `[scenario]`,
/// so that each setting has exactly one home.
const TOP_LEVEL_ONLY: [(&str, &str); 6] = [
    ("models", "[models.<name>]"),
    ("cv", "[cv]"),
    ("pairs", "[[pairs]]"),
    ("loao_models", "the top-level `loao` list"),
    ("master_seed", "the top-level `seed`"),
    ("q_mode", "the top-level `q`"),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub json: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: None, csv: true, json: true }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    q: Option<WeightMode>,
    #[serde(default)]
    loao: Vec<String>,
    #[serde(default)]
    scenario: Option<toml::Table>,
    #[serde(default)]
    models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    cv: CvConfig,
    #[serde(default)]
    pairs: Vec<PairConfig>,
    #[serde(default)]
    output: OutputConfig,
    #[serde(default)]
    columns: Option<CsvColumns>,
}

/// A validated configuration file.
#[derive(Debug, Clone)]
pub struct StudyConfigFile {
    pub seed: u64,
    pub q: WeightMode,
    pub scenario: Option<ScenarioConfig>,
    /// In name order.
    pub models: Vec<ModelSpec>,
    pub cv: CvConfig,
    pub pairs: Vec<PairConfig>,
    pub loao: Vec<String>,
    pub output: OutputConfig,
    pub columns: CsvColumns,
}

impl StudyConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let raw: RawConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        Self::from_raw(raw).with_context(|| format!("in {}", path.display()))
    }

    #[cfg(test)]
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_raw(toml::from_str(text)?)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let models = raw
            .models
            .iter()
            .map(|(name, m)| m.to_spec(name).with_context(|| format!("models.{name}")))
            .collect::<Result<Vec<_>>>()?;
        let known = |n: &str| models.iter().any(|m| m.name == n);
        for p in &raw.pairs {
            for n in [&p.a, &p.b] {
                if !known(n) {
                    bail!("pairs: model `{n}` is not defined under [models]");
                }
            }
        }
        for n in &raw.loao {
            if !known(n) {
                bail!("loao: model `{n}` is not defined under [models]");
            }
        }
        let q = raw.q.unwrap_or(WeightMode::Population);
        let scenario = match raw.scenario {
            None => None,
            Some(table) => {
                for (key, home) in TOP_LEVEL_ONLY {
                    if table.contains_key(key) {
                        bail!("scenario.{key}: set this in {home} instead");
                    }
                }
                let mut s: ScenarioConfig = table.try_into().context("scenario")?;
                s.models = models.clone();
                s.cv = raw.cv;
                s.pairs = raw.pairs.clone();
                s.loao_models = raw.loao.clone();
                s.master_seed = raw.seed;
                s.q_mode = q;
                s.validate().context("scenario")?;
                Some(s)
            }
        };
        Ok(StudyConfigFile {
            seed: raw.seed,
            q,
            scenario,
            models,
            cv: raw.cv,
            pairs: raw.pairs,
            loao: raw.loao,
            output: raw.output,
            columns: raw.columns.unwrap_or_default(),
        })
    }

    pub fn scenario(&self) -> Result<&ScenarioConfig> {
        self.scenario.as_ref().context("this command needs a [scenario] section")
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .with_context(|| format!("model `{name}` is not defined under [models]"))
    }

    /// Applies command-line overrides; flags win over the file.
    pub fn override_with(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(scheme) = o.scheme {
            self.cv.scheme = scheme;
        }
        if let Some(k) = o.k {
            self.cv.k = k;
        }
        if let Some(r) = o.resplits {
            self.cv.resplits = r;
        }
        if let Some(q) = o.q {
            self.q = q;
        }
        if let Some(s) = &mut self.scenario {
            s.master_seed = self.seed;
            s.cv = self.cv;
            s.q_mode = self.q;
            s.validate()?;
        }
        Ok(())
    }

    /// `--out` if given, else `[output] dir`.
    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .context("no output directory: pass --out or set [output] dir")
    }
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scheme: Option<saecv_core::cv::Scheme>,
    pub k: Option<usize>,
    pub resplits: Option<usize>,
    pub q: Option<WeightMode>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[scenario]
clusters_per_stratum = 2
households_per_cluster = 5
[[scenario.areas]]
id = "A"
prevalence = 0.3
frame_clusters = 6
[models.M1]
family = "fay-herriot"
pc_u = 1.0
pc_alpha = 0.01
"#;

    #[test]
    fn minimal_file_resolves() {
        let c = StudyConfigFile::from_toml(MINIMAL).unwrap();
        let s = c.scenario().unwrap();
        assert_eq!(s.master_seed, 3);
        assert_eq!(s.models.len(), 1);
        assert_eq!(c.q, WeightMode::Population);
    }

    #[test]
    fn typo_rejected() {
        let bad = MINIMAL.replace("households_per_cluster", "households_per_clustr");
        assert!(StudyConfigFile::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("pc_alpha", "pc_alfa");
        assert!(StudyConfigFile::from_toml(&bad).is_err());
    }

    #[test]
    fn undefined_pair_model_rejected() {
        let text = format!("{MINIMAL}\n[[pairs]]\na = \"M1\"\nb = \"M9\"\n");
        let err = StudyConfigFile::from_toml(&text).unwrap_err();
        assert!(format!("{err:#}").contains("M9"));
    }

    #[test]
    fn seed_in_scenario_rejected() {
        let text = MINIMAL.replace("households_per_cluster = 5", "households_per_cluster = 5\nmaster_seed = 4");
        assert!(StudyConfigFile::from_toml(&text).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = StudyConfigFile::from_toml(MINIMAL).unwrap();
        c.override_with(&Overrides { seed: Some(9), k: Some(3), ..Default::default() }).unwrap();
        assert_eq!(c.scenario().unwrap().master_seed, 9);
        assert_eq!(c.scenario().unwrap().cv.k, 3);
    }
}
