//! Run configuration: defaults, TOML file, command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skdf::data::GeneratorConfig;
use skdf::eval::EvalConfig;
use skdf::model::ModelConfig;
use skdf::supervision::TeacherConfig;
use skdf::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    #[default]
    Oracle,
    File,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Categories introduced per task, taken in universe order.
    pub task_sizes: Vec<usize>,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 2000,
            test_scenes: 400,
            task_sizes: vec![8, 8],
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: crate::ablate::VARIANTS.iter().map(|v| v.to_string()).collect(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 1-based task to train or evaluate up to.
    pub task: usize,
    pub teacher: TeacherMode,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Precomputed teacher detections, for `teacher = "file"`.
    pub teacher_file: Option<PathBuf>,
    /// Teacher-to-dataset category names; identity when absent.
    pub alignment_file: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub oracle: TeacherConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: 1,
            teacher: TeacherMode::Oracle,
            out_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data"),
            teacher_file: None,
            alignment_file: None,
            data: DataConfig::default(),
            model: ModelConfig {
                num_known: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            oracle: TeacherConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<usize>,
    pub teacher: Option<TeacherMode>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    /// Defaults, then `path`, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text, p)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(t) = overrides.task {
            cfg.task = t;
        }
        if let Some(t) = overrides.teacher {
            cfg.teacher = t;
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.task == 0 || self.task > self.data.task_sizes.len() {
            return bad(format!("task: must lie in 1..={}", self.data.task_sizes.len()));
        }
        let total: usize = self.data.task_sizes.iter().sum();
        if total != self.data.generator.universe.len() {
            return bad(format!(
                "data.task_sizes: sum {total} does not match the {} categories of the universe",
                self.data.generator.universe.len()
            ));
        }
        if self.data.task_sizes.contains(&0) {
            return bad("data.task_sizes: every task needs at least one category".into());
        }
        if self.model.num_known != self.data.task_sizes[0] {
            return bad(format!("model.num_known: {} does not match data.task_sizes[0] = {}", self.model.num_known, self.data.task_sizes[0]));
        }
        if self.model.image_size != self.data.generator.image_size {
            return bad("model.image_size: differs from data.generator.image_size".into());
        }
        if self.teacher == TeacherMode::File && self.teacher_file.is_none() {
            return bad("teacher_file: required when teacher = \"file\"".into());
        }
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.data.generator.validate().map_err(|e| CliError::Config(format!("data.generator: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("sed = 3\n", Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().contains("run.toml") && err.to_string().contains("sed"));
        let err = RunConfig::from_toml("[train]\nepoch = 3\n", Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\nteacher = \"off\"\n[train]\nepochs = 3\n").unwrap();
        let file_only = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap();
        assert_eq!((file_only.seed, file_only.teacher, file_only.train.epochs), (5, TeacherMode::Off, 3));
        assert_eq!(file_only.train.lr, TrainConfig::default().lr);
        let flags = Overrides {
            seed: Some(9),
            teacher: Some(TeacherMode::Oracle),
            ..Default::default()
        };
        let both = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!((both.seed, both.teacher, both.train.epochs), (9, TeacherMode::Oracle, 3));
    }

    #[test]
    fn inconsistent_configs_name_the_key() {
        let cfg = RunConfig {
            task: 3,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("task"));
        let mut cfg = RunConfig::default();
        cfg.model.num_known = 4;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.num_known"));
    }
}
