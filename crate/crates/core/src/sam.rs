//! Semantic attention: decompose a feature map into per-class activation
//! maps M, content-aware category representations V, and attention-path
//! scores s_m.
//!
//! The transform X→X' is one 1×1 conv followed by LeakyReLU. Per class c,
//! v_c is the M-weighted spatial sum of X': v_c = Σ_{i,j} m_{i,j}^c · x'_{i,j}.
//! Three activation-map recipes are supported: classify per position then
//! max-pool the score maps (`ClsThenGmp`), or the two classic CAM orders
//! that pool first and classify the pooled vector (`GapThenCls`,
//! `GmpThenCls`).

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{PoolMode, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Order of classification vs. spatial pooling when building M and s_m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Per-position classifier scores, then global max pooling; M comes
    /// from the raw score maps.
    ClsThenGmp,
    /// Classifier on the average-pooled feature vector; M is the CAM of the
    /// classifier weights.
    GapThenCls,
    /// Classifier on the max-pooled feature vector; M as CAM.
    GmpThenCls,
}

impl MapMode {
    pub const ALL: [MapMode; 3] = [MapMode::GapThenCls, MapMode::GmpThenCls, MapMode::ClsThenGmp];

    /// Human-readable label used in ablation tables.
    pub fn label(&self) -> &'static str {
        match self {
            MapMode::ClsThenGmp => "cls->GMP",
            MapMode::GapThenCls => "GAP->cls",
            MapMode::GmpThenCls => "GMP->cls",
        }
    }
}

/// Spatial pooling used for the attention-path scores in `ClsThenGmp` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePool {
    Max,
    Avg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub repr_channels: usize,
    pub map_mode: MapMode,
    /// Apply a Sigmoid to regularize M. Scores are always taken from the
    /// pre-Sigmoid responses so the loss stays in logit space.
    pub sigmoid_maps: bool,
    pub score_pool: ScorePool,
    pub bias: bool,
    pub leaky_slope: f32,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            num_classes: 8,
            in_channels: 32,
            repr_channels: 64,
            map_mode: MapMode::ClsThenGmp,
            sigmoid_maps: true,
            score_pool: ScorePool::Max,
            bias: true,
            leaky_slope: 0.2,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.repr_channels == 0 {
            return Err(Error::Config(
                "in_channels and repr_channels must be >= 1".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Tape handles produced by one SAM forward pass.
pub struct SamOutput {
    /// Activation maps M, `[B×C×H×W]`.
    pub maps: Var,
    /// Category representations V, `[B×C×D']`.
    pub repr: Var,
    /// Attention-path logits s_m, `[B×C]`.
    pub scores: Var,
}

pub struct Sam {
    cfg: SamConfig,
    transform_w: ParamId,
    transform_b: Option<ParamId>,
    pub(crate) cls_w: ParamId,
    pub(crate) cls_b: Option<ParamId>,
}

impl Sam {
    pub fn new(cfg: SamConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, d, dp) = (cfg.num_classes, cfg.in_channels, cfg.repr_channels);
        let transform_w =
            store.add_uniform("sam.transform.w", ParamGroup::Features, vec![dp, d], d, rng);
        let transform_b = cfg
            .bias
            .then(|| store.add_uniform("sam.transform.b", ParamGroup::Features, vec![dp], d, rng));
        let cls_w = store.add_uniform("sam.cls.w", ParamGroup::Head, vec![c, d], d, rng);
        let cls_b = cfg
            .bias
            .then(|| store.add_uniform("sam.cls.b", ParamGroup::Head, vec![c], d, rng));
        Ok(Sam {
            cfg,
            transform_w,
            transform_b,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &SamConfig {
        &self.cfg
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "sam input",
                xs,
                &[0, self.cfg.in_channels, 0, 0],
            ));
        }
        Ok(())
    }

    /// X → X': 1×1 conv to `repr_channels` followed by LeakyReLU.
    pub fn transform_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let w = store.leaf(tape, self.transform_w);
        let b = self.transform_b.map(|id| store.leaf(tape, id));
        let pre = tape.conv1x1(x, w, b)?;
        Ok(tape.leaky_relu(pre, self.cfg.leaky_slope))
    }

    /// Activation maps M `[B×C×H×W]` and attention-path logits s_m `[B×C]`.
    pub fn activation_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let w = store.leaf(tape, self.cls_w);
        let b = self.cls_b.map(|id| store.leaf(tape, id));
        match self.cfg.map_mode {
            MapMode::ClsThenGmp => {
                let raw = tape.conv1x1(x, w, b)?;
                let pool = match self.cfg.score_pool {
                    ScorePool::Max => PoolMode::Max,
                    ScorePool::Avg => PoolMode::Avg,
                };
                let scores = tape.global_pool(raw, pool)?;
                let maps = if self.cfg.sigmoid_maps {
                    tape.sigmoid(raw)
                } else {
                    raw
                };
                Ok((maps, scores))
            }
            MapMode::GapThenCls | MapMode::GmpThenCls => {
                let pool = if self.cfg.map_mode == MapMode::GapThenCls {
                    PoolMode::Avg
                } else {
                    PoolMode::Max
                };
                let pooled = tape.global_pool(x, pool)?; // [B×D]
                let wt = tape.transpose(w)?; // [D×C]
                let mut scores = tape.matmul(pooled, wt)?;
                if let Some(b) = b {
                    scores = tape.add_bias(scores, b, 1)?;
                }
                // CAM: convolve the classifier weights over X (no bias, so a
                // map reflects spatial evidence only)
                let cam = tape.conv1x1(x, w, None)?;
                let maps = if self.cfg.sigmoid_maps {
                    tape.sigmoid(cam)
                } else {
                    cam
                };
                Ok((maps, scores))
            }
        }
    }

    /// Full pass: X → (M, V, s_m).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<SamOutput> {
        let xp = self.transform_features(tape, store, x)?;
        let (maps, scores) = self.activation_maps(tape, store, x)?;
        let repr = category_representations(tape, maps, xp)?;
        Ok(SamOutput { maps, repr, scores })
    }
}

/// v_c[b] = Σ_{i,j} M[b,c,i,j] · X'[b,:,i,j], differentiable through both
/// inputs. M is `[B×C×H×W]`, X' is `[B×D'×H×W]`; result is `[B×C×D']`.
pub fn category_representations(tape: &mut Tape, maps: Var, xprime: Var) -> Result<Var> {
    let ms = tape.shape(maps).to_vec();
    let xs = tape.shape(xprime).to_vec();
    if ms.len() != 4 || xs.len() != 4 || ms[0] != xs[0] || ms[2..] != xs[2..] {
        return Err(Error::shape("category_representations", &ms, &xs));
    }
    let (b, c, h, w) = (ms[0], ms[1], ms[2], ms[3]);
    let dp = xs[1];
    let m_flat = tape.reshape(maps, vec![b, c, h * w])?;
    let x_flat = tape.reshape(xprime, vec![b, dp, h * w])?;
    let x_t = tape.transpose(x_flat)?; // [B×HW×D']
    tape.bmm(m_flat, x_t)
}
