//! Declarative run configuration.
//!
//! A run file is TOML. It may name a built-in `profile`, whose values are
//! filled in first and then overridden key by key by the file. A `[dataset]`
//! table with a different `kind` than the profile's replaces it entirely.
//!
//! ```toml
//! profile = "smnist"
//! seed = 7
//!
//! [dataset]
//! kind = "smnist"
//! dir = "data/mnist"
//!
//! [network]
//! regime = "unstable"
//! reset_enabled = false
//!
//! [training]
//! epochs = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_binned_spikes, load_smnist, PatternTask, SequenceDataset};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::neuron::StabilityRegime;
use crate::train::{AdamW, GroupHyper, ParamGroups, TrainConfig};

pub const PROFILES: &[&str] = &[
    "smnist",
    "mswc-stable-reset",
    "mswc-stable-noreset",
    "mswc-unstable-reset",
    "mswc-unstable-noreset",
    "dvs-gesture",
    "synthetic",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Sequential MNIST from the four standard IDX files in `dir`.
    Smnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
        /// Fraction of the training set held out for model selection.
        #[serde(default)]
        validation_fraction: f64,
    },
    /// Generated temporal-pattern task (`[dataset.task]`). The first
    /// `train_samples` samples train, the rest test.
    Synthetic {
        task: PatternTask,
        train_samples: usize,
    },
    /// Pre-binned spike files.
    Binned {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        validation_fraction: f64,
    },
}

/// Data prepared for a run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SequenceDataset,
    /// Evaluated after every epoch and used to pick the best checkpoint.
    pub selection: SequenceDataset,
    /// Present when `selection` is a validation split.
    pub test: Option<SequenceDataset>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        match self {
            DatasetSpec::Smnist { validation_fraction, .. }
            | DatasetSpec::Binned { validation_fraction, .. } => {
                if !frac_ok(*validation_fraction) {
                    return Err(Error::Config(format!(
                        "validation_fraction must lie in [0, 1), got {validation_fraction}"
                    )));
                }
                Ok(())
            }
            DatasetSpec::Synthetic { task, train_samples } => {
                task.validate()?;
                let total = task.num_classes * task.samples_per_class;
                if *train_samples == 0 || *train_samples >= total {
                    return Err(Error::Config(format!(
                        "train_samples must lie in 1..{total}, got {train_samples}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Input and output channel counts known without touching the disk.
    pub fn known_channels(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSpec::Smnist { .. } => Some((1, 10)),
            DatasetSpec::Synthetic { task, .. } => Some((task.channels, task.num_classes)),
            DatasetSpec::Binned { .. } => None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Smnist { dir, .. } => fix(dir),
            DatasetSpec::Binned { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DatasetSpec::Synthetic { .. } => {}
        }
    }

    pub fn load(&self, seed: u64) -> Result<Splits> {
        self.validate()?;
        let (train, test, fraction) = match self {
            DatasetSpec::Smnist {
                dir,
                train_limit,
                test_limit,
                validation_fraction,
            } => {
                let (mut train, mut test) = load_smnist(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                if let Some(k) = train_limit {
                    train = train.truncated(*k);
                }
                if let Some(k) = test_limit {
                    test = test.truncated(*k);
                }
                (train, test, *validation_fraction)
            }
            DatasetSpec::Synthetic { task, train_samples } => {
                let (train, test) = task.generate()?.split_at(*train_samples);
                (train, test, 0.0)
            }
            DatasetSpec::Binned {
                train,
                test,
                validation_fraction,
            } => (
                load_binned_spikes(train)?,
                load_binned_spikes(test)?,
                *validation_fraction,
            ),
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data("train and test splits must be non-empty".into()));
        }
        if train.c_in != test.c_in || train.c_out != test.c_out {
            return Err(Error::Data(format!(
                "train ({}x{}) and test ({}x{}) channel counts differ",
                train.c_in, train.c_out, test.c_in, test.c_out
            )));
        }
        if fraction > 0.0 {
            let (train, val) = train.split_validation(fraction, seed)?;
            Ok(Splits {
                train,
                selection: val,
                test: Some(test),
            })
        } else {
            Ok(Splits {
                train,
                selection: test,
                test: None,
            })
        }
    }
}

/// Optimization settings. The run seed lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub grad_clip: f64,
    pub adamw: AdamW,
    /// Learning rate and weight decay per parameter group.
    pub groups: ParamGroups,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub training: TrainingSection,
}

fn hyper(lr: f64, weight_decay: f64) -> GroupHyper {
    GroupHyper { lr, weight_decay }
}

impl RunConfig {
    /// Built-in defaults for a named profile.
    pub fn profile(name: &str) -> Result<Self> {
        let mswc = |regime: StabilityRegime, reset: bool, lr: f64, wd: f64| {
            let mut net = NetworkConfig::new(20, 100, 2, 256, 8, 4);
            net.regime = regime;
            net.reset_enabled = reset;
            net.dropout = 0.4;
            net.init.rho = 0.1;
            let groups = ParamGroups {
                ssm: hyper(lr, 1e-3),
                other: hyper(lr, wd),
                rho: hyper(lr, wd),
                r_bias: hyper(lr, wd),
            };
            (
                DatasetSpec::Binned {
                    train: "mswc/train.ssb".into(),
                    test: "mswc/test.ssb".into(),
                    validation_fraction: 0.0,
                },
                net,
                100,
                256,
                groups,
            )
        };
        let (dataset, network, epochs, batch_size, groups) = match name {
            "smnist" => {
                let mut net = NetworkConfig::new(1, 10, 2, 96, 8, 8);
                net.dropout = 0.3;
                net.init.rho = 0.5;
                let groups = ParamGroups {
                    ssm: hyper(1e-4, 1e-3),
                    other: hyper(1e-3, 1e-2),
                    rho: hyper(1e-5, 0.0),
                    r_bias: hyper(1e-5, 0.0),
                };
                let ds = DatasetSpec::Smnist {
                    dir: "data/mnist".into(),
                    train_limit: None,
                    test_limit: None,
                    validation_fraction: 0.1,
                };
                (ds, net, 50, 128, groups)
            }
            "mswc-stable-reset" => mswc(StabilityRegime::Stable, true, 1e-3, 1e-3),
            "mswc-stable-noreset" => mswc(StabilityRegime::Stable, false, 1e-2, 1e-4),
            "mswc-unstable-reset" => mswc(StabilityRegime::Unstable, true, 1e-3, 1e-4),
            "mswc-unstable-noreset" => mswc(StabilityRegime::Unstable, false, 1e-3, 1e-4),
            "dvs-gesture" => {
                let mut net = NetworkConfig::new(2 * 128 * 128, 11, 3, 128, 8, 24);
                net.init.rho = 0.8;
                let groups = ParamGroups {
                    ssm: hyper(1e-2, 1e-2),
                    other: hyper(1e-4, 0.0),
                    rho: hyper(1e-4, 1e-2),
                    r_bias: hyper(1e-6, 1e-5),
                };
                let ds = DatasetSpec::Binned {
                    train: "dvs-gesture/train.ssb".into(),
                    test: "dvs-gesture/test.ssb".into(),
                    validation_fraction: 0.0,
                };
                (ds, net, 50, 16, groups)
            }
            "synthetic" => {
                let mut task = PatternTask::new(2, 50, 8, 150);
                task.noise = 0.1;
                let mut net = NetworkConfig::new(8, 2, 2, 32, 4, 4);
                net.regime = StabilityRegime::Unstable;
                let ds = DatasetSpec::Synthetic {
                    task,
                    train_samples: 200,
                };
                (ds, net, 200, 20, ParamGroups::uniform(1e-2, 0.0))
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown profile `{other}` (known: {})",
                    PROFILES.join(", ")
                )))
            }
        };
        Ok(RunConfig {
            profile: Some(name.to_string()),
            seed: 0,
            dataset,
            network,
            training: TrainingSection {
                epochs,
                batch_size,
                eval_batch_size: 256,
                grad_clip: 1e5,
                adamw: AdamW::default(),
                groups,
            },
        })
    }

    /// Parse a run file. Relative dataset paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let user: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let merged = match user.get("profile") {
            Some(toml::Value::String(name)) => {
                let mut defaults = toml::Value::try_from(Self::profile(name)?)
                    .map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut defaults, user);
                defaults
            }
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => user,
        };
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.dataset.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        self.train_config().validate()?;
        if let Some((c_in, c_out)) = self.dataset.known_channels() {
            if (c_in, c_out) != (self.network.c_in, self.network.c_out) {
                return Err(Error::Config(format!(
                    "network expects {}x{} channels, dataset provides {c_in}x{c_out}",
                    self.network.c_in, self.network.c_out
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            groups: t.groups,
            adamw: t.adamw,
            grad_clip: t.grad_clip,
            seed: self.seed,
        }
    }
}

/// Overlay `over` onto `base`, table by table.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let replace_whole = k == "dataset" && kind_differs(b.get(&k), &v);
                match b.get_mut(&k) {
                    Some(slot) if !replace_whole => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn kind_differs(base: Option<&toml::Value>, over: &toml::Value) -> bool {
    let kind = |v: &toml::Value| v.get("kind").and_then(|k| k.as_str().map(str::to_owned));
    match (base.and_then(kind), kind(over)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_validates_and_round_trips() {
        for name in PROFILES {
            let cfg = RunConfig::profile(name).unwrap();
            cfg.network.validate().unwrap();
            cfg.train_config().validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            let back = RunConfig::from_toml_str(&text, Path::new("")).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn smnist_profile_matches_hyperparameter_table() {
        let cfg = RunConfig::profile("smnist").unwrap();
        let n = &cfg.network;
        assert_eq!((n.num_hidden_layers, n.h, n.n, n.n_out), (2, 96, 8, 8));
        assert_eq!(n.dropout, 0.3);
        assert_eq!((cfg.training.epochs, cfg.training.batch_size), (50, 128));
        assert_eq!(cfg.training.groups.ssm, hyper(1e-4, 1e-3));
        assert_eq!(cfg.training.groups.rho, hyper(1e-5, 0.0));
    }

    #[test]
    fn mswc_regimes_carry_their_own_rates() {
        let a = RunConfig::profile("mswc-stable-noreset").unwrap();
        assert_eq!(a.training.groups.other, hyper(1e-2, 1e-4));
        assert!(!a.network.reset_enabled);
        let b = RunConfig::profile("mswc-unstable-reset").unwrap();
        assert_eq!(b.network.regime, StabilityRegime::Unstable);
        assert_eq!(b.training.groups.ssm, hyper(1e-3, 1e-3));
    }

    #[test]
    fn file_overrides_profile_key_by_key() {
        let text = r#"
            profile = "synthetic"
            seed = 9
            [network]
            reset_enabled = false
            [training]
            epochs = 3
            [training.groups.rho]
            lr = 0.5
        "#;
        let cfg = RunConfig::from_toml_str(text, Path::new("")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(!cfg.network.reset_enabled);
        assert_eq!(cfg.network.h, 32);
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.groups.rho, hyper(0.5, 0.0));
    }

    #[test]
    fn dataset_of_other_kind_replaces_profile_dataset() {
        let text = r#"
            profile = "synthetic"
            [dataset]
            kind = "binned"
            train = "a.ssb"
            test = "b.ssb"
        "#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/runs")).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Binned {
                train: "/runs/a.ssb".into(),
                test: "/runs/b.ssb".into(),
                validation_fraction: 0.0
            }
        );
    }

    #[test]
    fn rejects_unknown_keys_and_profiles() {
        let bad_key = "profile = \"synthetic\"\n[network]\nwidth = 3\n";
        assert!(matches!(
            RunConfig::from_toml_str(bad_key, Path::new("")),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::profile("cifar"), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let text = "profile = \"synthetic\"\n[network]\nc_in = 3\n";
        assert!(matches!(
            RunConfig::from_toml_str(text, Path::new("")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_split_sizes() {
        let cfg = RunConfig::profile("synthetic").unwrap();
        let s = cfg.dataset.load(0).unwrap();
        assert_eq!((s.train.len(), s.selection.len()), (200, 100));
        assert!(s.test.is_none());
    }
}
