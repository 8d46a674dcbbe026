//! Training configuration: a flat key-value file (TOML syntax, every key at
//! top level) covering the optimizer recipe, model dimensions, ablation
//! switches and the data source. Unknown keys are rejected; omitted keys
//! take the defaults below.

use crate::data::SyntheticSpec;
use crate::dgcn::{GraphHeadConfig, GraphMode};
use crate::error::{Error, Result};
use crate::head::AggregationMode;
use crate::model::ModelConfig;
use crate::optim::{GroupRates, LrSchedule};
use crate::sam::{MapMode, SamConfig, ScorePool};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // optimizer recipe
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f32,
    pub lr_features: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_step_epochs: Vec<usize>,
    pub lr_gamma: f32,

    // model dimensions and ablation switches
    pub num_classes: usize,
    pub in_channels: usize,
    pub repr_channels: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub graph_mode: GraphMode,
    pub aggregation: AggregationMode,
    pub map_mode: MapMode,
    pub sigmoid_maps: bool,
    pub score_pool: ScorePool,
    pub bias: bool,
    pub leaky_slope: f32,
    pub static_identity_init: bool,

    // data source: either file indices, or the synthetic knobs below
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_index: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data_index: Option<String>,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f32,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub data_seed: u64,
    /// Marginal probability shared by every class.
    pub marginal: f32,
    /// Extra pair couplings as "a:b:rate" strings; unlisted pairs are
    /// independent.
    pub cooccur_pairs: Vec<String>,
    pub amplitude: f32,
    pub block_height: usize,
    pub block_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            batch_size: 18,
            lr_head: 0.5,
            lr_features: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_step_epochs: vec![30, 40],
            lr_gamma: 0.1,
            num_classes: 8,
            in_channels: 32,
            repr_channels: 64,
            hidden_dim: 64,
            out_dim: 64,
            graph_mode: GraphMode::SThenD,
            aggregation: AggregationMode::Bi,
            map_mode: MapMode::ClsThenGmp,
            sigmoid_maps: true,
            score_pool: ScorePool::Max,
            bias: true,
            leaky_slope: 0.2,
            static_identity_init: false,
            data_index: None,
            eval_data_index: None,
            height: 8,
            width: 8,
            noise_sigma: 0.5,
            train_samples: 2000,
            eval_samples: 500,
            data_seed: 1,
            marginal: 0.4,
            cooccur_pairs: Vec::new(),
            amplitude: 1.0,
            block_height: 4,
            block_width: 4,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_head <= 0.0 || self.lr_features <= 0.0 || self.lr_gamma <= 0.0 {
            return Err(Error::Config("learning rates and gamma must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        let mut prev = None;
        for &e in &self.lr_step_epochs {
            if e >= self.epochs {
                return Err(Error::Config(format!(
                    "lr step epoch {e} not below epochs {}",
                    self.epochs
                )));
            }
            if let Some(p) = prev {
                if e <= p {
                    return Err(Error::Config("lr_step_epochs must be ascending".into()));
                }
            }
            prev = Some(e);
        }
        if !(0.0..=1.0).contains(&self.marginal) {
            return Err(Error::Config(format!(
                "marginal must be in [0,1], got {}",
                self.marginal
            )));
        }
        for pair in &self.cooccur_pairs {
            parse_pair(pair)?;
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sam: SamConfig {
                num_classes: self.num_classes,
                in_channels: self.in_channels,
                repr_channels: self.repr_channels,
                map_mode: self.map_mode,
                sigmoid_maps: self.sigmoid_maps,
                score_pool: self.score_pool,
                bias: self.bias,
                leaky_slope: self.leaky_slope,
            },
            graph: GraphHeadConfig {
                mode: self.graph_mode,
                num_classes: self.num_classes,
                in_dim: self.repr_channels,
                hidden_dim: self.hidden_dim,
                out_dim: self.out_dim,
                bias: self.bias,
                leaky_slope: self.leaky_slope,
                static_identity_init: self.static_identity_init,
            },
            aggregation: self.aggregation,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: GroupRates {
                head: self.lr_head,
                features: self.lr_features,
            },
            step_epochs: self.lr_step_epochs.clone(),
            gamma: self.lr_gamma,
        }
    }

    /// The synthetic spec for one split, from the flat data knobs.
    pub fn synthetic_spec(&self, seed: u64, samples: usize) -> Result<SyntheticSpec> {
        let marginals = vec![self.marginal; self.num_classes];
        let mut cooccurrence = SyntheticSpec::independent_cooccurrence(&marginals);
        for pair in &self.cooccur_pairs {
            let (a, b, rate) = parse_pair(pair)?;
            if a >= self.num_classes || b >= self.num_classes || a == b {
                return Err(Error::Config(format!(
                    "cooccur pair {pair:?} invalid for {} classes",
                    self.num_classes
                )));
            }
            cooccurrence[a][b] = rate;
            cooccurrence[b][a] = rate;
        }
        let spec = SyntheticSpec {
            classes: self.num_classes,
            channels: self.in_channels,
            height: self.height,
            width: self.width,
            prototypes: SyntheticSpec::random_prototypes(
                self.num_classes,
                self.in_channels,
                self.data_seed,
            ),
            cooccurrence,
            noise_sigma: self.noise_sigma,
            samples,
            seed,
            amplitude: self.amplitude,
            block_height: self.block_height,
            block_width: self.block_width,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// FNV-1a over the canonical serialized form; stored in checkpoints and
    /// checked on resume.
    pub fn config_hash(&self) -> u64 {
        let text = self.to_toml_string();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

fn parse_pair(text: &str) -> Result<(usize, usize, f32)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "cooccur pair {text:?} must be \"a:b:rate\""
        )));
    }
    let a = parts[0]
        .trim()
        .parse::<usize>()
        .map_err(|e| Error::Config(format!("pair {text:?}: {e}")))?;
    let b = parts[1]
        .trim()
        .parse::<usize>()
        .map_err(|e| Error::Config(format!("pair {text:?}: {e}")))?;
    let rate = parts[2]
        .trim()
        .parse::<f32>()
        .map_err(|e| Error::Config(format!("pair {text:?}: {e}")))?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "pair {text:?}: rate must be in [0,1]"
        )));
    }
    Ok((a, b, rate))
}
