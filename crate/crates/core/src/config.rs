//! Run settings loaded from a flat TOML file.
//!
//! Keys mirror CLI flag names with `-` written as `_` (`epochs`, `lr`,
//! `decay_mode`, `n_speakers`, ...). One `seed` drives corpus generation,
//! weight initialisation and shuffling. Command-line flags override the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::Architecture;
use crate::error::{Error, Result};
use crate::eval::DenoiseSides;
use crate::nnet::{DecayMode, Loss, TrainConfig};
use crate::plda::DEFAULT_EM_ITERS;
use crate::synth::CorpusConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub batch: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSettings {
            epochs: base.epochs,
            lr: base.initial_lr,
            decay: base.decay,
            decay_mode: base.decay_mode,
            batch: 32,
            hidden: 256,
            blocks: crate::denoiser::DEFAULT_BLOCKS,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            initial_lr: self.lr,
            decay: self.decay,
            epochs: self.epochs,
            batch_size: self.batch,
            seed,
            decay_mode: self.decay_mode,
            loss: Loss::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldaSettings {
    pub iters: usize,
    pub center: bool,
    pub length_norm: bool,
}

impl Default for PldaSettings {
    fn default() -> Self {
        PldaSettings {
            iters: DEFAULT_EM_ITERS,
            center: true,
            length_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub snr_grid: Vec<f64>,
    pub archs: Vec<String>,
    pub denoise_sides: DenoiseSides,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            snr_grid: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0],
            archs: vec!["dae".into(), "stacked".into()],
            denoise_sides: DenoiseSides::Both,
        }
    }
}

impl SweepSettings {
    pub fn architectures(&self) -> Result<Vec<Architecture>> {
        self.archs.iter().map(|a| a.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub corpus: CorpusConfig,
    pub train: TrainSettings,
    pub plda: PldaSettings,
    pub sweep: SweepSettings,
}

fn table_of<T: Serialize>(value: &T) -> Result<toml::Table> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("settings structs serialize to tables"),
        Err(e) => Err(Error::Config(format!("cannot encode settings: {e}"))),
    }
}

fn section<T: DeserializeOwned>(t: toml::Table, what: &str) -> Result<T> {
    toml::Value::Table(t)
        .try_into()
        .map_err(|e| Error::Config(format!("{what} settings: {e}")))
}

impl Settings {
    pub fn seed(&self) -> u64 {
        self.corpus.seed
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let flat: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let defaults = Settings::default();
        let key_sets = [
            table_of(&defaults.corpus)?,
            table_of(&defaults.train)?,
            table_of(&defaults.plda)?,
            table_of(&defaults.sweep)?,
        ];
        let mut parts: [toml::Table; 4] = Default::default();
        for (k, v) in flat {
            let Some(i) = key_sets.iter().position(|s| s.contains_key(&k)) else {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            };
            parts[i].insert(k, v);
        }
        let [corpus, train, plda, sweep] = parts;
        let settings = Settings {
            corpus: section(corpus, "corpus")?,
            train: section(train, "training")?,
            plda: section(plda, "PLDA")?,
            sweep: section(sweep, "sweep")?,
        };
        settings.sweep.architectures()?;
        Ok(settings)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)
            }
        }
    }

    /// The flat TOML form, keys sorted.
    pub fn to_toml(&self) -> Result<String> {
        let mut flat = toml::Table::new();
        for t in [
            table_of(&self.corpus)?,
            table_of(&self.train)?,
            table_of(&self.plda)?,
            table_of(&self.sweep)?,
        ] {
            flat.extend(t);
        }
        toml::to_string(&flat).map_err(|e| Error::Config(format!("cannot encode settings: {e}")))
    }
}
