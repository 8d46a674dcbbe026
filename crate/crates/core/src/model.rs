//! Full model assembly: semantic attention → graph head → score fusion,
//! plus the global-average-pool linear baseline used for comparison runs.

use crate::dgcn::{GraphHead, GraphHeadConfig};
use crate::error::{Error, Result};
use crate::head::{bce_loss, fuse_scores, AggregationMode, ClassifierHead};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::sam::{Sam, SamConfig};
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sam: SamConfig,
    pub graph: GraphHeadConfig,
    pub aggregation: AggregationMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sam.validate()?;
        self.graph.validate()?;
        if self.sam.num_classes != self.graph.num_classes {
            return Err(Error::Config(format!(
                "class count mismatch: sam {} vs graph {}",
                self.sam.num_classes, self.graph.num_classes
            )));
        }
        if self.sam.repr_channels != self.graph.in_dim {
            return Err(Error::Config(format!(
                "repr_channels {} must equal graph in_dim {}",
                self.sam.repr_channels, self.graph.in_dim
            )));
        }
        Ok(())
    }
}

/// Tape handles from one full forward pass.
pub struct ModelOutput {
    /// Fused logits s `[B×C]`.
    pub scores: Var,
    /// Relation-path logits s_r.
    pub relation_scores: Var,
    /// Attention-path logits s_m.
    pub attention_scores: Var,
    /// Activation maps M `[B×C×H×W]`.
    pub maps: Var,
    /// Category representations V `[B×C×D']`.
    pub repr: Var,
    /// Discriminative vectors Z `[B×C×D₂]`.
    pub z: Var,
    /// Dynamic adjacency `[B×C×C]` when the mode has a dynamic graph.
    pub dynamic_adj: Option<Var>,
}

pub struct AddGcn {
    cfg: ModelConfig,
    pub sam: Sam,
    pub graph: GraphHead,
    pub classifier: ClassifierHead,
}

impl AddGcn {
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let sam = Sam::new(cfg.sam.clone(), store, rng)?;
        let graph = GraphHead::new(cfg.graph.clone(), store, rng)?;
        let classifier = ClassifierHead::new(
            cfg.aggregation,
            cfg.graph.num_classes,
            cfg.graph.out_dim,
            cfg.sam.bias,
            store,
            rng,
        );
        Ok(AddGcn {
            cfg,
            sam,
            graph,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<ModelOutput> {
        let sam_out = self.sam.forward(tape, store, x)?;
        let graph_out = self.graph.forward(tape, store, sam_out.repr)?;
        let s_r = self.classifier.relation_scores(tape, store, graph_out.z)?;
        let scores = fuse_scores(tape, s_r, sam_out.scores)?;
        Ok(ModelOutput {
            scores,
            relation_scores: s_r,
            attention_scores: sam_out.scores,
            maps: sam_out.maps,
            repr: sam_out.repr,
            z: graph_out.z,
            dynamic_adj: graph_out.dynamic_adj,
        })
    }
}

/// Anything that maps a feature-map batch to per-class logits; lets the
/// training loop drive the full head and the baseline identically.
pub trait ScoringModel {
    fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var>;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, x: Var, labels: &Tensor) -> Result<Var> {
        let s = self.scores(tape, store, x)?;
        bce_loss(tape, s, labels)
    }
}

impl ScoringModel for AddGcn {
    fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward(tape, store, x)?.scores)
    }
}

/// Baseline: linear classifier on globally average-pooled features.
pub struct GapLinear {
    w: ParamId,
    b: Option<ParamId>,
    in_channels: usize,
}

impl GapLinear {
    pub fn new(
        num_classes: usize,
        in_channels: usize,
        bias: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(
            "baseline.w",
            ParamGroup::Head,
            vec![num_classes, in_channels],
            in_channels,
            rng,
        );
        let b = bias.then(|| {
            store.add_uniform(
                "baseline.b",
                ParamGroup::Head,
                vec![num_classes],
                in_channels,
                rng,
            )
        });
        GapLinear {
            w,
            b,
            in_channels,
        }
    }
}

impl ScoringModel for GapLinear {
    fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(Error::shape("baseline input", xs, &[0, self.in_channels, 0, 0]));
        }
        let pooled = tape.global_pool(x, PoolMode::Avg)?;
        let w = store.leaf(tape, self.w);
        let wt = tape.transpose(w)?;
        let mut s = tape.matmul(pooled, wt)?;
        if let Some(b) = self.b {
            let bv = store.leaf(tape, b);
            s = tape.add_bias(s, bv, 1)?;
        }
        Ok(s)
    }
}
