//! Training loop, checkpointing, ablation sweeps and tensor-export
//! helpers. One tape per batch: forward, BCE loss on the fused scores,
//! backward, SGD step. Per-epoch shuffling draws from a stream derived
//! from (seed, epoch), so a resumed run replays the exact batch order of
//! an uninterrupted one; with the single-threaded kernels this makes
//! seed-fixed training bitwise reproducible, checkpoint resume included.

use crate::adgt;
use crate::config::TrainConfig;
use crate::data::{generate, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalBatch, MetricsReport};
use crate::model::{AddGcn, GapLinear, ModelOutput, ScoringModel};
use crate::optim::Sgd;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADGK";
pub const CHECKPOINT_VERSION: u8 = 1;

// ── Checkpoint ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub config_hash: u64,
    pub config_text: String,
    /// (name, group, value) in parameter-store order.
    pub params: Vec<(String, ParamGroup, Tensor)>,
    /// Momentum buffers aligned with `params`.
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, epoch: usize, store: &ParamStore, opt: &Sgd) -> Self {
        Checkpoint {
            epoch,
            config_hash: cfg.config_hash(),
            config_text: cfg.to_toml_string(),
            params: store
                .iter()
                .map(|p| (p.name.clone(), p.group, p.value.clone()))
                .collect(),
            velocity: opt.velocity().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, group, value) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match group {
                ParamGroup::Features => 0,
                ParamGroup::Head => 1,
            });
            out.extend_from_slice(&adgt::to_bytes(value));
        }
        for v in &self.velocity {
            out.extend_from_slice(&adgt::to_bytes(v));
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = adgt::Reader::new(buf);
        let magic = r.take(4, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}, expected \"ADGK\"", magic),
            });
        }
        let version = r.u8("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: r.offset() - 1,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let epoch = r.u32("epoch")? as usize;
        let config_hash = r.u64("config hash")?;
        let text_len = r.u32("config length")? as usize;
        let text_bytes = r.take(text_len, "config text")?;
        let config_text = String::from_utf8(text_bytes.to_vec()).map_err(|e| Error::Format {
            offset: r.offset() - text_len as u64,
            reason: format!("config text not utf-8: {e}"),
        })?;
        let n = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16("name length")? as usize;
            let name_bytes = r.take(name_len, "param name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| Error::Format {
                offset: r.offset() - name_len as u64,
                reason: format!("param name not utf-8: {e}"),
            })?;
            let group = match r.u8("param group")? {
                0 => ParamGroup::Features,
                1 => ParamGroup::Head,
                other => {
                    return Err(Error::Format {
                        offset: r.offset() - 1,
                        reason: format!("unknown param group {other}"),
                    })
                }
            };
            let value = adgt::read_from(&mut r)?;
            params.push((name, group, value));
        }
        let mut velocity = Vec::with_capacity(n);
        for _ in 0..n {
            velocity.push(adgt::read_from(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.offset(),
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Checkpoint {
            epoch,
            config_hash,
            config_text,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Write parameters and momentum into a freshly built model's store and
    /// optimizer, matching by name.
    pub fn restore(&self, store: &mut ParamStore, opt: &mut Sgd) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} params, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let mut velocity = opt.velocity().to_vec();
        for ((name, _, value), vel) in self.params.iter().zip(&self.velocity) {
            let id = store.find(name).ok_or_else(|| {
                Error::Contract(format!("checkpoint param {name:?} not in model"))
            })?;
            store.set_value(id, value.clone())?;
            velocity[id.0] = vel.clone();
        }
        opt.restore_velocity(velocity)
    }
}

/// Rebuild the model described by a checkpoint's embedded config and load
/// its weights. For evaluation and export; no optimizer state.
pub fn load_model(checkpoint: &Checkpoint) -> Result<(TrainConfig, ParamStore, AddGcn)> {
    let cfg = TrainConfig::from_toml_str(&checkpoint.config_text)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
    let model = AddGcn::new(cfg.model_config(), &mut store, &mut rng)?;
    let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    checkpoint.restore(&mut store, &mut opt)?;
    Ok((cfg, store, model))
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_head: f32,
    pub lr_features: f32,
    #[serde(skip)]
    pub report: MetricsReport,
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub model: AddGcn,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn init_seed(seed: u64) -> u64 {
    mix(seed ^ 0x696e6974)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed) ^ mix(epoch as u64 ^ 0x5eed));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Synthetic specs of the two splits (when the config does not point at
/// file indices): same prototypes and co-occurrence, split-specific seeds.
pub fn split_specs(cfg: &TrainConfig) -> Result<(crate::data::SyntheticSpec, crate::data::SyntheticSpec)> {
    Ok((
        cfg.synthetic_spec(mix(cfg.data_seed ^ 0x7261), cfg.train_samples)?,
        cfg.synthetic_spec(mix(cfg.data_seed ^ 0x6576), cfg.eval_samples)?,
    ))
}

/// Build the train and eval splits from the config: file indices when
/// given, otherwise synthetic generation with split-specific seeds.
pub fn build_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let train = match &cfg.data_index {
        Some(path) => load_dataset(path)?,
        None => generate(&split_specs(cfg)?.0)?,
    };
    let eval = match &cfg.eval_data_index {
        Some(path) => load_dataset(path)?,
        None => generate(&split_specs(cfg)?.1)?,
    };
    if !train.is_empty() && train.classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "train data has {} classes, config expects {}",
            train.classes, cfg.num_classes
        )));
    }
    Ok((train, eval))
}

/// Forward the whole dataset and score it. Returns the report and the raw
/// `[N×C]` fused logits.
pub fn evaluate_model<M: ScoringModel>(
    model: &M,
    store: &ParamStore,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(MetricsReport, Tensor)> {
    if ds.is_empty() {
        return Err(Error::Contract("evaluate_model: empty dataset".into()));
    }
    let mut all_scores = Vec::with_capacity(ds.len() * ds.classes);
    for fb in ds.batches(batch_size) {
        let mut tape = Tape::new();
        let x = tape.leaf(fb.x);
        let s = model.scores(&mut tape, store, x)?;
        all_scores.extend_from_slice(tape.value(s).data());
    }
    let scores = Tensor::new(vec![ds.len(), ds.classes], all_scores)?;
    let report = evaluate(&EvalBatch::new(scores.clone(), ds.labels_tensor())?)?;
    Ok((report, scores))
}

/// Core loop shared by the full head and the baseline.
fn fit<M: ScoringModel>(
    cfg: &TrainConfig,
    model: &M,
    store: &mut ParamStore,
    opt: &mut Sgd,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    start_epoch: usize,
    end_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore, &Sgd) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if train_ds.is_empty() {
        return Err(Error::Contract("fit: empty training dataset".into()));
    }
    let schedule = cfg.schedule();
    let mut history = Vec::new();
    for epoch in start_epoch..end_epoch {
        let rates = schedule.rates_at(epoch);
        let order = shuffled_indices(train_ds.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fb = train_ds.batch(chunk);
            let mut tape = Tape::new();
            let x = tape.leaf(fb.x);
            let loss = model.loss(&mut tape, store, x, &fb.y)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                eprintln!(
                    "non-finite loss {loss_value} at epoch {epoch}, batch {batch_idx}; samples: {:?}",
                    fb.ids
                );
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape.backward(loss)?;
            store.absorb_grads(&tape);
            opt.step(store, rates);
            store.zero_grads();
            loss_sum += loss_value as f64;
            batches += 1;
        }
        let (report, _) = evaluate_model(model, store, eval_ds, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr_head: rates.head,
            lr_features: rates.features,
            report,
        };
        on_epoch(&record, store, opt)?;
        history.push(record);
    }
    Ok(history)
}

fn metrics_csv_header() -> String {
    format!("epoch,mean_loss,lr_head,lr_features,{}\n", MetricsReport::CSV_HEADER)
}

fn metrics_csv_row(rec: &EpochRecord) -> String {
    format!(
        "{},{:.6},{},{},{}\n",
        rec.epoch,
        rec.mean_loss,
        rec.lr_head,
        rec.lr_features,
        rec.report.to_csv_row()
    )
}

/// Train the full head on the configured data for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let (train_ds, eval_ds) = build_datasets(cfg)?;
    train_datasets(cfg, &train_ds, &eval_ds, out_dir, None, cfg.epochs)
}

/// Resume a checkpointed run and finish the remaining epochs.
pub fn resume(cfg: &TrainConfig, checkpoint: &Checkpoint, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let (train_ds, eval_ds) = build_datasets(cfg)?;
    train_datasets(cfg, &train_ds, &eval_ds, out_dir, Some(checkpoint), cfg.epochs)
}

/// General entry point: explicit datasets, optional resume checkpoint, and
/// an epoch cap (for producing mid-run checkpoints).
pub fn train_datasets(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out_dir: Option<&Path>,
    from: Option<&Checkpoint>,
    end_epoch: usize,
) -> Result<TrainOutput> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
    let model = AddGcn::new(cfg.model_config(), &mut store, &mut rng)?;
    let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let mut start_epoch = 0;
    if let Some(ck) = from {
        if ck.config_hash != cfg.config_hash() {
            return Err(Error::Config(format!(
                "config hash mismatch: checkpoint {:#x} vs current {:#x}; refusing to resume",
                ck.config_hash,
                cfg.config_hash()
            )));
        }
        ck.restore(&mut store, &mut opt)?;
        start_epoch = ck.epoch;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = String::new();
    if start_epoch == 0 {
        csv.push_str(&metrics_csv_header());
    }
    let ckpt_path = out_dir.map(|d| d.join("checkpoint.adgk"));
    let history = fit(
        cfg,
        &model,
        &mut store,
        &mut opt,
        train_ds,
        eval_ds,
        start_epoch,
        end_epoch,
        |rec, store, opt| {
            csv.push_str(&metrics_csv_row(rec));
            if let Some(path) = &ckpt_path {
                Checkpoint::capture(cfg, rec.epoch + 1, store, opt).save(path)?;
            }
            Ok(())
        },
    )?;
    let checkpoint = Checkpoint::capture(cfg, end_epoch, &store, &opt);
    if let Some(dir) = out_dir {
        let csv_path = dir.join("metrics.csv");
        if start_epoch > 0 && csv_path.exists() {
            let mut existing = std::fs::read_to_string(&csv_path)?;
            existing.push_str(&csv);
            std::fs::write(&csv_path, existing)?;
        } else {
            std::fs::write(&csv_path, &csv)?;
        }
        if let Some(rec) = history.last() {
            std::fs::write(
                dir.join("report.json"),
                serde_json::to_vec_pretty(&rec.report.to_flat_json())?,
            )?;
        }
    }
    Ok(TrainOutput {
        store,
        model,
        history,
        checkpoint,
    })
}

/// Train the GAP-linear baseline on the same data and report per-epoch
/// metrics.
pub fn train_baseline(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<(ParamStore, GapLinear, Vec<EpochRecord>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
    let model = GapLinear::new(cfg.num_classes, cfg.in_channels, cfg.bias, &mut store, &mut rng);
    let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let history = fit(
        cfg,
        &model,
        &mut store,
        &mut opt,
        train_ds,
        eval_ds,
        0,
        cfg.epochs,
        |_, _, _| Ok(()),
    )?;
    Ok((store, model, history))
}

// ── Ablation sweeps ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    GraphMode,
    Aggregation,
    MapMode,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "graph_mode" => Ok(AblationAxis::GraphMode),
            "aggregation" => Ok(AblationAxis::Aggregation),
            "map_mode" => Ok(AblationAxis::MapMode),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected graph_mode, aggregation or map_mode"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub final_loss: f64,
    pub report: MetricsReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,final_loss,{}\n", MetricsReport::CSV_HEADER);
    for row in rows {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            row.variant,
            row.final_loss,
            row.report.to_csv_row()
        ));
    }
    out
}

/// Train one model per variant of the chosen axis on shared data and a
/// shared seed. The graph-mode axis additionally includes the GAP-linear
/// baseline row.
pub fn ablate(base: &TrainConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (train_ds, eval_ds) = build_datasets(base)?;
    let mut rows = Vec::new();
    match axis {
        AblationAxis::GraphMode => {
            let (_, _, history) = train_baseline(base, &train_ds, &eval_ds)?;
            let last = history.last().expect("at least one epoch");
            rows.push(AblationRow {
                variant: "baseline".into(),
                final_loss: last.mean_loss,
                report: last.report.clone(),
            });
            for mode in crate::dgcn::GraphMode::ALL {
                let mut cfg = base.clone();
                cfg.graph_mode = mode;
                let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, cfg.epochs)?;
                let last = out.history.last().expect("at least one epoch");
                rows.push(AblationRow {
                    variant: mode.label().to_string(),
                    final_loss: last.mean_loss,
                    report: last.report.clone(),
                });
            }
        }
        AblationAxis::Aggregation => {
            for mode in crate::head::AggregationMode::ALL {
                let mut cfg = base.clone();
                cfg.aggregation = mode;
                let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, cfg.epochs)?;
                let last = out.history.last().expect("at least one epoch");
                rows.push(AblationRow {
                    variant: mode.label().to_string(),
                    final_loss: last.mean_loss,
                    report: last.report.clone(),
                });
            }
        }
        AblationAxis::MapMode => {
            for mode in crate::sam::MapMode::ALL {
                let mut cfg = base.clone();
                cfg.map_mode = mode;
                let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, cfg.epochs)?;
                let last = out.history.last().expect("at least one epoch");
                rows.push(AblationRow {
                    variant: mode.label().to_string(),
                    final_loss: last.mean_loss,
                    report: last.report.clone(),
                });
            }
        }
    }
    Ok(rows)
}

// ── Export helpers ───────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct MapIndexEntry {
    sample_id: String,
    class_id: usize,
    file: String,
}

#[derive(Debug, Serialize)]
struct ScoreIndexEntry {
    sample_id: String,
    file: String,
}

#[derive(Debug, Serialize)]
struct MapsIndex {
    maps: Vec<MapIndexEntry>,
    scores: Vec<ScoreIndexEntry>,
}

/// Write activation maps (one H×W ADGT per sample and class) and the
/// attention-path scores (one length-C ADGT per sample), plus a JSON index.
pub fn export_maps(
    model: &AddGcn,
    store: &ParamStore,
    ds: &Dataset,
    batch_size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut index = MapsIndex {
        maps: Vec::new(),
        scores: Vec::new(),
    };
    for fb in ds.batches(batch_size) {
        let mut tape = Tape::new();
        let x = tape.leaf(fb.x);
        let out: ModelOutput = model.forward(&mut tape, store, x)?;
        let maps = tape.value(out.maps);
        let scores = tape.value(out.attention_scores);
        let (c, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
        for (bi, id) in fb.ids.iter().enumerate() {
            for class_id in 0..c {
                let start = (bi * c + class_id) * h * w;
                let map = Tensor::new(
                    vec![h, w],
                    maps.data()[start..start + h * w].to_vec(),
                )?;
                let file = format!("{id}_class{class_id}.adgt");
                adgt::write_file(out_dir.join(&file), &map)?;
                index.maps.push(MapIndexEntry {
                    sample_id: id.clone(),
                    class_id,
                    file,
                });
            }
            let srow = Tensor::new(
                vec![c],
                scores.data()[bi * c..(bi + 1) * c].to_vec(),
            )?;
            let file = format!("{id}_scores.adgt");
            adgt::write_file(out_dir.join(&file), &srow)?;
            index.scores.push(ScoreIndexEntry {
                sample_id: id.clone(),
                file,
            });
        }
    }
    let index_path = out_dir.join("maps_index.json");
    std::fs::write(&index_path, serde_json::to_vec_pretty(&index)?)?;
    Ok(index_path)
}

/// Write the dynamic adjacency of one sample (and the static adjacency,
/// when the mode has one) in ADGT format for external plotting.
pub fn dump_adjacency(
    model: &AddGcn,
    store: &ParamStore,
    ds: &Dataset,
    sample_id: &str,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let idx = ds
        .samples
        .iter()
        .position(|s| s.id == sample_id)
        .ok_or_else(|| Error::Config(format!("sample {sample_id:?} not in dataset")))?;
    let fb = ds.batch(&[idx]);
    let mut written = Vec::new();
    let mut tape = Tape::new();
    let x = tape.leaf(fb.x);
    let out = model.forward(&mut tape, store, x)?;
    if let Some(adj) = out.dynamic_adj {
        let a = tape.value(adj);
        let c = a.shape()[1];
        let t = Tensor::new(vec![c, c], a.data().to_vec())?;
        let path = out_dir.join(format!("{sample_id}_adjacency_dynamic.adgt"));
        adgt::write_file(&path, &t)?;
        written.push(path);
    }
    if let Some(a_s) = model.graph.static_adjacency(store) {
        let path = out_dir.join("adjacency_static.adgt");
        adgt::write_file(&path, a_s)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Config(
            "model has neither a dynamic nor a static graph to dump".into(),
        ));
    }
    Ok(written)
}

/// Per-sample fused scores as JSONL: {"sample_id", "scores", "labels"}.
pub fn write_scores_jsonl(
    path: impl AsRef<Path>,
    ds: &Dataset,
    scores: &Tensor,
) -> Result<()> {
    let c = ds.classes;
    let mut out = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let row: Vec<f32> = scores.data()[i * c..(i + 1) * c].to_vec();
        let line = serde_json::json!({
            "sample_id": s.id,
            "scores": row,
            "labels": s.labels,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgcn::GraphMode;

    /// Small, fast config used across training tests.
    pub(crate) fn tiny_train_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.num_classes = 4;
        cfg.in_channels = 6;
        cfg.repr_channels = 8;
        cfg.hidden_dim = 8;
        cfg.out_dim = 8;
        cfg.height = 4;
        cfg.width = 4;
        cfg.block_height = 2;
        cfg.block_width = 2;
        cfg.train_samples = 32;
        cfg.eval_samples = 16;
        cfg.noise_sigma = 0.3;
        cfg.marginal = 0.45;
        cfg.lr_head = 0.05;
        cfg.lr_features = 0.01;
        cfg.lr_step_epochs = vec![];
        cfg
    }

    #[test]
    fn loss_decreases_on_most_seeds_after_one_epoch() {
        let full_batch_loss = |model: &AddGcn, store: &ParamStore, ds: &Dataset| -> f64 {
            let fb = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let x = tape.leaf(fb.x);
            let l = model.loss(&mut tape, store, x, &fb.y).unwrap();
            tape.value(l).item().unwrap() as f64
        };
        let mut wins = 0;
        for seed in 0..10 {
            let mut cfg = tiny_train_config();
            cfg.seed = seed;
            cfg.train_samples = 8;
            cfg.eval_samples = 8;
            cfg.batch_size = 4;
            cfg.epochs = 1;
            let (train_ds, eval_ds) = build_datasets(&cfg).unwrap();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
            let model = AddGcn::new(cfg.model_config(), &mut store, &mut rng).unwrap();
            let init_loss = full_batch_loss(&model, &store, &train_ds);
            let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, 1).unwrap();
            let trained_loss = full_batch_loss(&out.model, &out.store, &train_ds);
            if trained_loss < init_loss {
                wins += 1;
            }
        }
        assert!(wins >= 8, "loss decreased on only {wins}/10 seeds");
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = tiny_train_config();
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bitwise() {
        let cfg = tiny_train_config();
        let full = train(&cfg, None).unwrap();
        let (train_ds, eval_ds) = build_datasets(&cfg).unwrap();
        let half = train_datasets(&cfg, &train_ds, &eval_ds, None, None, 1).unwrap();
        assert_eq!(half.checkpoint.epoch, 1);
        let resumed =
            train_datasets(&cfg, &train_ds, &eval_ds, None, Some(&half.checkpoint), cfg.epochs)
                .unwrap();
        assert_eq!(full.checkpoint.to_bytes(), resumed.checkpoint.to_bytes());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_idempotent() {
        let cfg = tiny_train_config();
        let out = train(&cfg, None).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn resume_refuses_on_config_hash_mismatch() {
        let cfg = tiny_train_config();
        let out = train(&cfg, None).unwrap();
        let mut other = cfg.clone();
        other.graph_mode = GraphMode::S;
        match resume(&other, &out.checkpoint, None) {
            Err(err) => assert!(err.to_string().contains("hash mismatch"), "{err}"),
            Ok(_) => panic!("resume with a different config must be refused"),
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_bitwise() {
        // config validation requires positive rates, so drive the loop with
        // explicit zero group rates
        let mut cfg = tiny_train_config();
        cfg.epochs = 1;
        let (train_ds, _) = build_datasets(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
        let model = AddGcn::new(cfg.model_config(), &mut store, &mut rng).unwrap();
        let before: Vec<Vec<u32>> = store
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
        for chunk in (0..train_ds.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let fb = train_ds.batch(chunk);
            let mut tape = Tape::new();
            let x = tape.leaf(fb.x);
            let loss = model.loss(&mut tape, &store, x, &fb.y).unwrap();
            tape.backward(loss).unwrap();
            store.absorb_grads(&tape);
            opt.step(
                &mut store,
                crate::optim::GroupRates {
                    head: 0.0,
                    features: 0.0,
                },
            );
            store.zero_grads();
        }
        let after: Vec<Vec<u32>> = store
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_sample_overfits_quickly() {
        let mut cfg = tiny_train_config();
        cfg.train_samples = 1;
        cfg.eval_samples = 1;
        cfg.batch_size = 1;
        cfg.lr_head = 0.1;
        cfg.lr_features = 0.02;
        let (train_ds, _) = build_datasets(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
        let model = AddGcn::new(cfg.model_config(), &mut store, &mut rng).unwrap();
        let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
        let fb = train_ds.batch(&[0]);
        let mut last = f32::INFINITY;
        for _step in 0..200 {
            let mut tape = Tape::new();
            let x = tape.leaf(fb.x.clone());
            let loss = model.loss(&mut tape, &store, x, &fb.y).unwrap();
            last = tape.value(loss).item().unwrap();
            if last < 0.01 {
                break;
            }
            tape.backward(loss).unwrap();
            store.absorb_grads(&tape);
            opt.step(
                &mut store,
                crate::optim::GroupRates {
                    head: cfg.lr_head,
                    features: cfg.lr_features,
                },
            );
            store.zero_grads();
        }
        assert!(last < 0.01, "loss stalled at {last}");
    }

    #[test]
    fn ablation_axes_emit_expected_row_sets() {
        let mut cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.train_samples = 16;
        cfg.eval_samples = 8;

        let rows = ablate(&cfg, AblationAxis::MapMode).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, vec!["GAP->cls", "GMP->cls", "cls->GMP"]);
        assert!(rows.iter().all(|r| r.final_loss.is_finite()));

        let rows = ablate(&cfg, AblationAxis::Aggregation).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, vec!["Sum", "Avg", "Max", "Bi"]);

        let rows = ablate(&cfg, AblationAxis::GraphMode).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            names,
            vec!["baseline", "S", "D", "P-add", "P-mul", "P-cat", "D->S", "S->D"]
        );
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn export_maps_and_adjacency_write_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.train_samples = 4;
        cfg.eval_samples = 4;
        let out = train(&cfg, None).unwrap();
        let (_, eval_ds) = build_datasets(&cfg).unwrap();

        let index_path =
            export_maps(&out.model, &out.store, &eval_ds, 2, dir.path().join("maps")).unwrap();
        let index: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&index_path).unwrap()).unwrap();
        assert_eq!(index["maps"].as_array().unwrap().len(), 4 * 4);
        assert_eq!(index["scores"].as_array().unwrap().len(), 4);
        let first = &index["maps"][0];
        let map_file = dir.path().join("maps").join(first["file"].as_str().unwrap());
        let t = adgt::read_file(map_file).unwrap();
        assert_eq!(t.shape(), &[4, 4]);

        let written = dump_adjacency(
            &out.model,
            &out.store,
            &eval_ds,
            &eval_ds.samples[0].id,
            dir.path().join("adj"),
        )
        .unwrap();
        assert_eq!(written.len(), 2); // dynamic + static for the default mode
        let adj = adgt::read_file(&written[0]).unwrap();
        assert_eq!(adj.shape(), &[4, 4]);
        assert!(adj.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn scores_jsonl_has_one_line_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.train_samples = 4;
        cfg.eval_samples = 4;
        let out = train(&cfg, None).unwrap();
        let (_, eval_ds) = build_datasets(&cfg).unwrap();
        let (_, scores) = evaluate_model(&out.model, &out.store, &eval_ds, 2).unwrap();
        let path = dir.path().join("scores.jsonl");
        write_scores_jsonl(&path, &eval_ds, &scores).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["scores"].as_array().unwrap().len(), 4);
        assert_eq!(first["labels"].as_array().unwrap().len(), 4);
    }
}
