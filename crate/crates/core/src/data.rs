//! Desk-scale data: a synthetic feature-map generator with planted class
//! patterns and pairwise label co-occurrence, plus ingestion of externally
//! precomputed feature maps from an ADGT file index.
//!
//! Label sets are drawn from a pairwise binary model. The co-occurrence
//! matrix carries marginal probabilities on the diagonal; an off-diagonal
//! entry is the co-occurrence rate of the pair, P(both | at least one).
//! The model's couplings are the pair log-odds-ratios and the fields are
//! calibrated per pair, so isolated pairs match their targets exactly and
//! multi-coupled nodes approximately. Sampling is Gibbs with a fixed 10
//! sweeps from an independent initialization.
//!
//! Feature maps plant `amplitude · prototype_c` over a random contiguous
//! block for each present class, then add isotropic Gaussian noise. Every
//! sample draws from its own seeded stream, so results are independent of
//! generation order and batch size.
//!
//! On disk, feature maps use the channel-last H×W×D layout; the loader
//! transposes to the channel-first internal layout.

use crate::adgt;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const MIN_PROTOTYPE_ANGLE_DEG: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// C unit vectors in R^D, pairwise at least 10° apart.
    pub prototypes: Vec<Vec<f32>>,
    /// C×C symmetric; diagonal = marginal class probabilities, off-diagonal
    /// = pair co-occurrence rate P(both | at least one).
    pub cooccurrence: Vec<Vec<f32>>,
    pub noise_sigma: f32,
    pub samples: usize,
    pub seed: u64,
    pub amplitude: f32,
    pub block_height: usize,
    pub block_width: usize,
}

impl SyntheticSpec {
    /// Co-occurrence rate of an independent pair with the given marginals.
    pub fn independent_rate(p_a: f32, p_b: f32) -> f32 {
        let union = p_a + p_b - p_a * p_b;
        if union <= 0.0 {
            0.0
        } else {
            p_a * p_b / union
        }
    }

    /// Matrix with the given marginals on the diagonal and independent
    /// rates everywhere else.
    pub fn independent_cooccurrence(marginals: &[f32]) -> Vec<Vec<f32>> {
        let c = marginals.len();
        let mut m = vec![vec![0.0f32; c]; c];
        for a in 0..c {
            for b in 0..c {
                m[a][b] = if a == b {
                    marginals[a]
                } else {
                    Self::independent_rate(marginals[a], marginals[b])
                };
            }
        }
        m
    }

    /// Random unit prototypes with pairwise angles above the floor,
    /// rejection-sampled from a seeded Gaussian.
    pub fn random_prototypes(classes: usize, channels: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x70726f746f));
        let normal = Normal::<f32>::new(0.0, 1.0).unwrap();
        let cos_floor = (MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos()) as f32;
        let mut protos: Vec<Vec<f32>> = Vec::with_capacity(classes);
        while protos.len() < classes {
            let mut v: Vec<f32> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < 1e-3 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            let ok = protos.iter().all(|p| {
                let dot: f32 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
                dot.abs() < cos_floor
            });
            if ok {
                protos.push(v);
            }
        }
        protos
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("channels and spatial extents must be >= 1".into()));
        }
        if self.block_height == 0
            || self.block_width == 0
            || self.block_height > self.height
            || self.block_width > self.width
        {
            return Err(Error::Config(format!(
                "block {}x{} does not fit the {}x{} map",
                self.block_height, self.block_width, self.height, self.width
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.amplitude <= 0.0 {
            return Err(Error::Config("amplitude must be > 0".into()));
        }
        if self.prototypes.len() != c {
            return Err(Error::Config(format!(
                "expected {} prototypes, got {}",
                c,
                self.prototypes.len()
            )));
        }
        let cos_floor = (MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos()) as f32;
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.len() != self.channels {
                return Err(Error::Config(format!(
                    "prototype {} has {} channels, expected {}",
                    i,
                    p.len(),
                    self.channels
                )));
            }
            let norm: f32 = p.iter().map(|x| x * x).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::Config(format!(
                    "prototype {} is not unit length (|v| = {})",
                    i, norm
                )));
            }
            for (j, q) in self.prototypes.iter().enumerate().skip(i + 1) {
                let dot: f32 = p.iter().zip(q).map(|(a, b)| a * b).sum();
                if dot.abs() >= cos_floor {
                    return Err(Error::Config(format!(
                        "prototypes {} and {} are closer than {}°",
                        i, j, MIN_PROTOTYPE_ANGLE_DEG
                    )));
                }
            }
        }
        if self.cooccurrence.len() != c || self.cooccurrence.iter().any(|r| r.len() != c) {
            return Err(Error::Config("cooccurrence must be C×C".into()));
        }
        for a in 0..c {
            for b in 0..c {
                let v = self.cooccurrence[a][b];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "cooccurrence[{a}][{b}] = {v} outside [0,1]"
                    )));
                }
                if (self.cooccurrence[a][b] - self.cooccurrence[b][a]).abs() > 1e-6 {
                    return Err(Error::Config("cooccurrence must be symmetric".into()));
                }
            }
        }
        // every pair's implied joint must be feasible for its marginals
        for a in 0..c {
            for b in a + 1..c {
                pair_table(
                    self.cooccurrence[a][a] as f64,
                    self.cooccurrence[b][b] as f64,
                    self.cooccurrence[a][b] as f64,
                )
                .map_err(|e| {
                    Error::Config(format!("pair ({a},{b}): {e}"))
                })?;
            }
        }
        Ok(())
    }
}

/// Joint probability implied by marginals and a co-occurrence rate.
fn pair_joint(p_a: f64, p_b: f64, rate: f64) -> f64 {
    rate * (p_a + p_b) / (1.0 + rate)
}

/// 2×2 table (P11, P10, P01, P00) for a pair; errors when infeasible.
fn pair_table(p_a: f64, p_b: f64, rate: f64) -> Result<[f64; 4]> {
    let j = pair_joint(p_a, p_b, rate);
    let lower = (p_a + p_b - 1.0).max(0.0);
    let upper = p_a.min(p_b);
    let tol = 1e-6;
    if j < lower - tol || j > upper + tol {
        return Err(Error::Config(format!(
            "joint {j:.4} outside feasible [{lower:.4}, {upper:.4}] for marginals ({p_a}, {p_b})"
        )));
    }
    let j = j.clamp(lower, upper);
    Ok([j, p_a - j, p_b - j, 1.0 - p_a - p_b + j])
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pairwise binary label model: P(y) ∝ exp(Σ α_c y_c + Σ β_ab y_a y_b).
struct LabelModel {
    alpha: Vec<f64>,
    beta: Vec<Vec<f64>>,
    /// classes pinned by marginal 0 or 1
    fixed: Vec<Option<bool>>,
    marginals: Vec<f64>,
}

impl LabelModel {
    fn build(spec: &SyntheticSpec) -> LabelModel {
        let c = spec.classes;
        let marginals: Vec<f64> = (0..c).map(|k| spec.cooccurrence[k][k] as f64).collect();
        let fixed: Vec<Option<bool>> = marginals
            .iter()
            .map(|&p| {
                if p <= 0.0 {
                    Some(false)
                } else if p >= 1.0 {
                    Some(true)
                } else {
                    None
                }
            })
            .collect();
        let mut beta = vec![vec![0.0f64; c]; c];
        let mut alpha: Vec<f64> = marginals
            .iter()
            .zip(&fixed)
            .map(|(&p, f)| if f.is_some() { 0.0 } else { logit(p) })
            .collect();
        let floor = 1e-9;
        for a in 0..c {
            for b in a + 1..c {
                if fixed[a].is_some() || fixed[b].is_some() {
                    continue;
                }
                let table =
                    pair_table(marginals[a], marginals[b], spec.cooccurrence[a][b] as f64)
                        .expect("validated spec");
                let [p11, p10, p01, p00] = table.map(|v| v.max(floor));
                let coupling = (p11 * p00 / (p10 * p01)).ln();
                beta[a][b] = coupling;
                beta[b][a] = coupling;
                // per-pair field correction; exact for isolated pairs
                alpha[a] += (p10 / p00).ln() - logit(marginals[a]);
                alpha[b] += (p01 / p00).ln() - logit(marginals[b]);
            }
        }
        LabelModel {
            alpha,
            beta,
            fixed,
            marginals,
        }
    }

    /// One label set via Gibbs sampling, 10 fixed sweeps. Guarantees at
    /// least one positive class by redrawing (occasionally falling back to
    /// activating the most probable class).
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let c = self.alpha.len();
        for _attempt in 0..100 {
            let mut y: Vec<u8> = (0..c)
                .map(|k| match self.fixed[k] {
                    Some(v) => v as u8,
                    None => (rng.random_range(0.0..1.0) < self.marginals[k]) as u8,
                })
                .collect();
            for _sweep in 0..10 {
                for k in 0..c {
                    if self.fixed[k].is_some() {
                        continue;
                    }
                    let mut field = self.alpha[k];
                    for (b, &yb) in y.iter().enumerate() {
                        if b != k && yb == 1 {
                            field += self.beta[k][b];
                        }
                    }
                    y[k] = (rng.random_range(0.0..1.0) < sigmoid(field)) as u8;
                }
            }
            if y.iter().any(|&v| v == 1) {
                return y;
            }
        }
        let mut y = vec![0u8; c];
        let best = self
            .marginals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        y[best] = 1;
        y
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed).wrapping_add(mix(index)))
}

#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub id: String,
    /// Channel-first feature map `[D×H×W]`.
    pub x: Tensor,
    /// Multi-hot labels, length C.
    pub labels: Vec<u8>,
}

/// In-memory dataset; read-only after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<DatasetSample>,
}

/// One training batch: inputs `[B×D×H×W]`, labels `[B×C]`.
pub struct FeatureMapBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assemble a batch from sample indices (in the given order).
    pub fn batch(&self, indices: &[usize]) -> FeatureMapBatch {
        assert!(!indices.is_empty(), "empty batch");
        let shape = self.samples[indices[0]].x.shape().to_vec();
        let per = self.samples[indices[0]].x.numel();
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * self.classes);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            x.extend_from_slice(s.x.data());
            y.extend(s.labels.iter().map(|&l| l as f32));
            ids.push(s.id.clone());
        }
        let mut full_shape = vec![indices.len()];
        full_shape.extend_from_slice(&shape);
        FeatureMapBatch {
            x: Tensor::new(full_shape, x).unwrap(),
            y: Tensor::new(vec![indices.len(), self.classes], y).unwrap(),
            ids,
        }
    }

    /// Sequential batches of at most `batch_size`.
    pub fn batches(&self, batch_size: usize) -> Vec<FeatureMapBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// All labels as an `[N×C]` tensor.
    pub fn labels_tensor(&self) -> Tensor {
        let data: Vec<f32> = self
            .samples
            .iter()
            .flat_map(|s| s.labels.iter().map(|&l| l as f32))
            .collect();
        Tensor::new(vec![self.len(), self.classes], data).unwrap()
    }
}

/// Generate a dataset from a spec. Deterministic for a fixed seed and
/// independent of how results are later batched.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let model = LabelModel::build(spec);
    let (d, h, w) = (spec.channels, spec.height, spec.width);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::<f32>::new(0.0, spec.noise_sigma).unwrap())
    } else {
        None
    };
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut rng = sample_rng(spec.seed, i as u64);
        let labels = model.sample(&mut rng);
        let mut x = Tensor::zeros(vec![d, h, w]);
        for (k, &present) in labels.iter().enumerate() {
            if present == 0 {
                continue;
            }
            let i0 = rng.random_range(0..=h - spec.block_height);
            let j0 = rng.random_range(0..=w - spec.block_width);
            let proto = &spec.prototypes[k];
            let data = x.data_mut();
            for (ch, &p) in proto.iter().enumerate() {
                let add = spec.amplitude * p;
                for r in i0..i0 + spec.block_height {
                    for cc in j0..j0 + spec.block_width {
                        data[(ch * h + r) * w + cc] += add;
                    }
                }
            }
        }
        if let Some(n) = &noise {
            for v in x.data_mut().iter_mut() {
                *v += n.sample(&mut rng);
            }
        }
        samples.push(DatasetSample {
            id: format!("sample-{i:05}"),
            x,
            labels,
        });
    }
    Ok(Dataset {
        classes: spec.classes,
        samples,
    })
}

/// Invert the coupling of one class pair: the flipped spec keeps all
/// marginals and replaces the pair's odds ratio by its reciprocal, so
/// frequently-paired classes appear apart and vice versa. Independent
/// pairs are unchanged.
pub fn flip_cooccurrence(spec: &SyntheticSpec, pair: (usize, usize)) -> Result<SyntheticSpec> {
    let (a, b) = pair;
    let c = spec.classes;
    if a >= c || b >= c || a == b {
        return Err(Error::Config(format!(
            "flip pair ({a},{b}) invalid for {c} classes"
        )));
    }
    let p_a = spec.cooccurrence[a][a] as f64;
    let p_b = spec.cooccurrence[b][b] as f64;
    let [p11, p10, p01, p00] =
        pair_table(p_a, p_b, spec.cooccurrence[a][b] as f64)?.map(|v| v.max(1e-9));
    let odds = p11 * p00 / (p10 * p01);
    let flipped_joint = joint_from_odds_ratio(p_a, p_b, 1.0 / odds)?;
    let flipped_rate = flipped_joint / (p_a + p_b - flipped_joint);
    let mut out = spec.clone();
    out.cooccurrence[a][b] = flipped_rate as f32;
    out.cooccurrence[b][a] = flipped_rate as f32;
    out.validate()?;
    Ok(out)
}

/// Generate the eval split whose co-occurrence for `pair` is inverted
/// relative to the training spec.
pub fn make_biased_eval_split(
    spec: &SyntheticSpec,
    pair: (usize, usize),
    seed: u64,
    samples: usize,
) -> Result<Dataset> {
    let mut flipped = flip_cooccurrence(spec, pair)?;
    flipped.seed = seed;
    flipped.samples = samples;
    generate(&flipped)
}

/// Joint probability of a pair with the given marginals and odds ratio
/// (the in-range root of the defining quadratic).
fn joint_from_odds_ratio(p_a: f64, p_b: f64, psi: f64) -> Result<f64> {
    let lower = (p_a + p_b - 1.0).max(0.0);
    let upper = p_a.min(p_b);
    if (psi - 1.0).abs() < 1e-9 {
        return Ok(p_a * p_b);
    }
    // ψ(p_a−J)(p_b−J) = J(1−p_a−p_b+J)
    let qa = psi - 1.0;
    let qb = -(psi * (p_a + p_b) + 1.0 - p_a - p_b);
    let qc = psi * p_a * p_b;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Err(Error::Config(format!(
            "no feasible joint for marginals ({p_a}, {p_b}) and odds ratio {psi}"
        )));
    }
    let root = disc.sqrt();
    for j in [(-qb - root) / (2.0 * qa), (-qb + root) / (2.0 * qa)] {
        if j >= lower - 1e-9 && j <= upper + 1e-9 {
            return Ok(j.clamp(lower, upper));
        }
    }
    Err(Error::Config(format!(
        "no root in [{lower}, {upper}] for odds ratio {psi}"
    )))
}

// ── Dataset files ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    spec: Option<SyntheticSpec>,
    samples: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    tensor_file: String,
    labels: Vec<u8>,
}

/// Write `index.json` plus one ADGT tensor per sample (channel-last on
/// disk) into `dir`. Returns the index path.
pub fn save_dataset(
    dataset: &Dataset,
    spec: Option<&SyntheticSpec>,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let file = format!("{}.adgt", s.id);
        // D,H,W -> H,W,D at the file boundary
        let disk = s.x.permuted(&[1, 2, 0])?;
        adgt::write_file(dir.join(&file), &disk)?;
        entries.push(IndexEntry {
            id: s.id.clone(),
            tensor_file: file,
            labels: s.labels.clone(),
        });
    }
    let index = IndexFile {
        spec: spec.cloned(),
        samples: entries,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?)?;
    Ok(path)
}

/// Load a dataset from an index file, validating shapes and labels.
pub fn load_dataset(index_path: impl AsRef<Path>) -> Result<Dataset> {
    let index_path = index_path.as_ref();
    let raw = std::fs::read(index_path).map_err(|e| {
        Error::Config(format!("cannot read index {}: {e}", index_path.display()))
    })?;
    let index: IndexFile = serde_json::from_slice(&raw)?;
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let mut classes = None;
    let mut shape: Option<Vec<usize>> = None;
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in index.samples {
        let path = dir.join(&entry.tensor_file);
        let disk = adgt::read_file(&path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            Error::Format { offset, reason } => Error::Format {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
        if disk.rank() != 3 {
            return Err(Error::Config(format!(
                "{}: expected rank-3 H×W×D tensor, got {:?}",
                path.display(),
                disk.shape()
            )));
        }
        // H,W,D -> D,H,W
        let x = disk.permuted(&[2, 0, 1])?;
        match &shape {
            None => shape = Some(x.shape().to_vec()),
            Some(s) => {
                if s != x.shape() {
                    return Err(Error::shape("dataset sample", s, x.shape()));
                }
            }
        }
        match classes {
            None => classes = Some(entry.labels.len()),
            Some(c) => {
                if c != entry.labels.len() {
                    return Err(Error::Config(format!(
                        "sample {} has {} labels, expected {c}",
                        entry.id,
                        entry.labels.len()
                    )));
                }
            }
        }
        if entry.labels.iter().any(|&l| l > 1) {
            return Err(Error::Config(format!(
                "sample {} has non-binary labels",
                entry.id
            )));
        }
        if entry.labels.iter().all(|&l| l == 0) {
            return Err(Error::Config(format!(
                "sample {} has no positive label",
                entry.id
            )));
        }
        samples.push(DatasetSample {
            id: entry.id,
            x,
            labels: entry.labels,
        });
    }
    Ok(Dataset {
        classes: classes.unwrap_or(0),
        samples,
    })
}
