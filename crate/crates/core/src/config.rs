//! Toolkit configuration file (TOML).
//!
//! Every section and key is optional; missing values take their defaults.
//! Angles in `[filtering]` are given in degrees, everything else in SI units.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{MixConfig, Optimizer, TrainConfig, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::realism::Sigmas;
use crate::sim::SimConfig;
use crate::synth::SynthesisConfig;
use crate::vocab::{DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilteringSection {
    pub d_thres: f64,
    pub theta_thres_deg: f64,
    pub check_ego: bool,
}

impl Default for FilteringSection {
    fn default() -> Self {
        Self {
            d_thres: 3.0,
            theta_thres_deg: 10.0,
            check_ego: false,
        }
    }
}

impl FilteringSection {
    pub fn to_filter_config(&self) -> FilterConfig {
        FilterConfig {
            d_thres: self.d_thres,
            theta_thres: self.theta_thres_deg.to_radians(),
            check_ego: self.check_ego,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularySection {
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for VocabularySection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
    /// `regular:collision`, e.g. `"10:1"`.
    pub ratio: String,
    pub w_r: f64,
    pub w_c: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            lr: t.lr,
            batch: t.batch,
            seed: t.seed,
            optimizer: t.optimizer,
            hidden: DEFAULT_HIDDEN.to_vec(),
            ratio: "10:1".into(),
            w_r: 1.0,
            w_c: 1.0,
        }
    }
}

impl TrainingSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            optimizer: self.optimizer,
            hidden: self.hidden.clone(),
        }
    }

    pub fn to_mix(&self) -> Result<MixConfig> {
        let mix = MixConfig {
            w_r: self.w_r,
            w_c: self.w_c,
            ..MixConfig::parse_ratio(&self.ratio)?
        };
        mix.validate()?;
        Ok(mix)
    }
}

/// Default inputs used when the matching command-line flag is absent.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub templates: Option<PathBuf>,
    pub map: Option<String>,
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub synthesis: SynthesisConfig,
    pub filtering: FilteringSection,
    pub simulator: SimConfig,
    pub vocabulary: VocabularySection,
    pub training: TrainingSection,
    pub realism: Sigmas,
    pub paths: PathsSection,
}

impl ToolkitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| {
                    let before = &text[..s.start];
                    let line = before.matches('\n').count() + 1;
                    let column = s.start - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    (line, column)
                })
                .unwrap_or((0, 0));
            Error::Parse {
                context: "config".into(),
                line,
                column,
                message: e.message().to_string(),
                payload: None,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut().filter(|x| x.is_relative()) {
                *x = base.join(&*x);
            }
        };
        resolve(&mut cfg.paths.templates);
        resolve(&mut cfg.paths.vocab);
        resolve(&mut cfg.paths.model);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.filtering.to_filter_config().validate()?;
        self.simulator.validate()?;
        self.training.to_mix()?;
        if self.vocabulary.k == 0 {
            return Err(Error::Config("vocabulary.k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_constants() {
        let c = ToolkitConfig::default();
        let f = c.filtering.to_filter_config();
        assert_eq!(f.d_thres, 3.0);
        assert!((f.theta_thres - 10f64.to_radians()).abs() < 1e-15);
        assert_eq!(c.training.lr, 2e-4);
        let mix = c.training.to_mix().unwrap();
        assert!((mix.p_r - 10.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = ToolkitConfig::default();
        assert_eq!(ToolkitConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = ToolkitConfig::from_toml("[filtering]\ntheta_thres_deg = 5.0\n[vocabulary]\nk = 64\n").unwrap();
        assert_eq!(p.vocabulary.k, 64);
        assert_eq!(p.filtering.d_thres, 3.0);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ToolkitConfig::from_toml("[filtering]\nd_thres = -1.0\n").is_err());
        assert!(ToolkitConfig::from_toml("[training]\nratio = \"abc\"\n").is_err());
        match ToolkitConfig::from_toml("[simulator]\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[paths]\nvocab = \"v.json\"\nmap = \"crossroads\"\n").unwrap();
        let c = ToolkitConfig::load(&path).unwrap();
        assert_eq!(c.paths.vocab.unwrap(), dir.path().join("v.json"));
        assert_eq!(c.paths.map.as_deref(), Some("crossroads"));
    }
}
