//! Run spec files: one TOML document describing the data source and whichever
//! of the partition / sweep / experiment sections a command needs.

use std::fs;
use std::path::{Path, PathBuf};

use fedhet::datasets::{global_split, load_mnist_idx, load_tabular_csv, synth_tabular, Dataset};
use fedhet::federation::ExperimentConfig;
use fedhet::heterogeneity::SweepGrid;
use fedhet::partition::PartitionParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// IDX image and label files.
    Mnist,
    /// Tabular CSV with a label column.
    Csv,
    /// Gaussian-blob stand-in for the tabular task.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: SourceKind,
    /// Overrides the loader's dataset name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    /// Holds out a stratified global test split (csv / synthetic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Output directory; `--out` wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn require<'a, T>(field: &'a Option<T>, name: &str, source: &str) -> Result<&'a T, CliError> {
    field
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("[data] source = \"{source}\" needs `{name}`")))
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a spec and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.images,
            &mut d.labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.path,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Replaces every seed in the spec.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(p) = &mut self.partition {
            p.seed = seed;
        }
        if let Some(s) = &mut self.sweep {
            s.seed = seed;
        }
        if let Some(e) = &mut self.experiment {
            e.seed = seed;
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding, output directory excluded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn partition_params(&self) -> Result<PartitionParams, CliError> {
        match (&self.partition, &self.experiment) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(e)) => Ok(e.partition_params()),
            (None, None) => Err(CliError::Config("spec has neither [partition] nor [experiment]".into())),
        }
    }

    pub fn experiment(&self) -> Result<&ExperimentConfig, CliError> {
        let e = self
            .experiment
            .as_ref()
            .ok_or_else(|| CliError::Config("spec has no [experiment] section".into()))?;
        e.validate().map_err(|err| CliError::Config(err.to_string()))?;
        Ok(e)
    }

    pub fn sweep(&self) -> Result<&SweepGrid, CliError> {
        self.sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("spec has no [sweep] section".into()))
    }

    /// Checks that the data section names what its source needs.
    pub fn check_data(&self) -> Result<(), CliError> {
        let d = &self.data;
        match d.source {
            SourceKind::Mnist => {
                require(&d.images, "images", "mnist")?;
                require(&d.labels, "labels", "mnist")?;
                if d.test_images.is_some() != d.test_labels.is_some() {
                    return Err(CliError::Config("test_images and test_labels go together".into()));
                }
            }
            SourceKind::Csv => {
                require(&d.path, "path", "csv")?;
                require(&d.label_column, "label_column", "csv")?;
            }
            SourceKind::Synthetic => {
                require(&d.classes, "classes", "synthetic")?;
                require(&d.samples, "samples", "synthetic")?;
                require(&d.dim, "dim", "synthetic")?;
            }
        }
        if let Some(f) = d.test_fraction {
            if d.source == SourceKind::Mnist {
                return Err(CliError::Config(
                    "mnist takes test_images/test_labels, not test_fraction".into(),
                ));
            }
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!("test_fraction {f} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// `seed` feeds the synthetic generator and the global split when the
    /// data section does not fix its own.
    pub fn load_data(&self, seed: u64) -> Result<LoadedData, CliError> {
        self.check_data()?;
        let d = &self.data;
        let data_seed = d.seed.unwrap_or(seed);
        let mut loaded = match d.source {
            SourceKind::Mnist => {
                let train = load_mnist_idx(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap())?;
                let test = match (&d.test_images, &d.test_labels) {
                    (Some(i), Some(l)) => Some(load_mnist_idx(i, l)?),
                    _ => None,
                };
                LoadedData { train, test }
            }
            SourceKind::Csv | SourceKind::Synthetic => {
                let full = if d.source == SourceKind::Csv {
                    load_tabular_csv(d.path.as_ref().unwrap(), d.label_column.as_ref().unwrap())?
                } else {
                    synth_tabular(d.classes.unwrap(), d.samples.unwrap(), d.dim.unwrap(), data_seed)?
                };
                match d.test_fraction {
                    Some(f) => {
                        let split = global_split(&full, f, data_seed)?;
                        LoadedData {
                            train: split.train,
                            test: Some(split.test),
                        }
                    }
                    None => LoadedData {
                        train: full,
                        test: None,
                    },
                }
            }
        };
        if let Some(name) = &d.name {
            loaded.train.name = name.clone();
            if let Some(t) = &mut loaded.test {
                t.name = format!("{name}-test");
            }
        }
        Ok(loaded)
    }
}
