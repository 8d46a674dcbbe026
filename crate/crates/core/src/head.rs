//! Final classification: relation-path scores s_r from Z, fusion with the
//! attention-path scores s_m, and the multi-label BCE training loss.
//!
//! `Bi` keeps one binary classifier per class on its own z_c; `Sum`/`Avg`/
//! `Max` first aggregate Z over the class axis into a single image vector
//! and classify that with a shared C-way linear map. Scores stay in logit
//! space throughout; fusion averages logits and the loss applies its own
//! Sigmoid via the softplus identity.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How Z is turned into relation-path scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Per-class binary classifier on each category vector.
    Bi,
    Sum,
    Avg,
    Max,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 4] = [
        AggregationMode::Sum,
        AggregationMode::Avg,
        AggregationMode::Max,
        AggregationMode::Bi,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AggregationMode::Bi => "Bi",
            AggregationMode::Sum => "Sum",
            AggregationMode::Avg => "Avg",
            AggregationMode::Max => "Max",
        }
    }
}

/// Relation-path classifier over Z `[B×C×D₂]`.
pub struct ClassifierHead {
    mode: AggregationMode,
    num_classes: usize,
    feat_dim: usize,
    w: ParamId,
    b: Option<ParamId>,
}

impl ClassifierHead {
    pub fn new(
        mode: AggregationMode,
        num_classes: usize,
        feat_dim: usize,
        bias: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // same weight shape for both families: one D₂ vector per class
        let w = store.add_uniform(
            "head.cls.w",
            ParamGroup::Head,
            vec![num_classes, feat_dim],
            feat_dim,
            rng,
        );
        let b = bias.then(|| {
            store.add_uniform("head.cls.b", ParamGroup::Head, vec![num_classes], feat_dim, rng)
        });
        ClassifierHead {
            mode,
            num_classes,
            feat_dim,
            w,
            b,
        }
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    /// s_r `[B×C]` from Z `[B×C×D₂]`.
    pub fn relation_scores(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 3 || zs[1] != self.num_classes || zs[2] != self.feat_dim {
            return Err(Error::shape(
                "relation_scores",
                &zs,
                &[0, self.num_classes, self.feat_dim],
            ));
        }
        let bsz = zs[0];
        let w = store.leaf(tape, self.w);
        match self.mode {
            AggregationMode::Bi => {
                let wb = tape.expand_batch(w, bsz)?; // [B×C×D₂]
                let zw = tape.mul(z, wb)?;
                let mut s = tape.sum_axis(zw, 2)?; // [B×C]
                if let Some(b) = self.b {
                    let bv = store.leaf(tape, b);
                    s = tape.add_bias(s, bv, 1)?;
                }
                Ok(s)
            }
            AggregationMode::Sum | AggregationMode::Avg | AggregationMode::Max => {
                let pooled = match self.mode {
                    AggregationMode::Sum => tape.sum_axis(z, 1)?,
                    AggregationMode::Avg => tape.mean_axis(z, 1)?,
                    AggregationMode::Max => tape.max_axis(z, 1)?,
                    AggregationMode::Bi => unreachable!(),
                }; // [B×D₂]
                let wt = tape.transpose(w)?;
                let mut s = tape.matmul(pooled, wt)?;
                if let Some(b) = self.b {
                    let bv = store.leaf(tape, b);
                    s = tape.add_bias(s, bv, 1)?;
                }
                Ok(s)
            }
        }
    }
}

/// Elementwise mean of the two score paths.
pub fn fuse_scores(tape: &mut Tape, s_r: Var, s_m: Var) -> Result<Var> {
    if tape.shape(s_r) != tape.shape(s_m) {
        return Err(Error::shape("fuse_scores", tape.shape(s_r), tape.shape(s_m)));
    }
    let sum = tape.add(s_r, s_m)?;
    Ok(tape.scale(sum, 0.5))
}

/// Multi-label BCE over logits, mean-reduced over the batch:
/// per sample, Σ_c softplus(s_c) − y_c·s_c. The gradient w.r.t. s is
/// (σ(s) − y)/B.
pub fn bce_loss(tape: &mut Tape, scores: Var, labels: &Tensor) -> Result<Var> {
    let ss = tape.shape(scores).to_vec();
    if labels.shape() != ss.as_slice() {
        return Err(Error::shape("bce_loss", &ss, labels.shape()));
    }
    if ss.len() != 2 {
        return Err(Error::Contract(format!(
            "bce_loss: scores must be [B×C], got {:?}",
            ss
        )));
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(
            "bce_loss: labels must be exactly 0 or 1".into(),
        ));
    }
    let bsz = ss[0];
    let y = tape.leaf(labels.clone());
    let sp = tape.softplus(scores);
    let ys = tape.mul(y, scores)?;
    let terms = tape.sub(sp, ys)?;
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, 1.0 / bsz as f32))
}

/// Reference form of the same loss through explicit σ and log. Underflows
/// for saturated scores; only used to cross-check the softplus identity in
/// safe ranges.
pub fn bce_loss_naive(tape: &mut Tape, scores: Var, labels: &Tensor) -> Result<Var> {
    let ss = tape.shape(scores).to_vec();
    let bsz = ss[0];
    let y = tape.leaf(labels.clone());
    let ones = tape.leaf(Tensor::full(ss.clone(), 1.0));
    let p = tape.sigmoid(scores);
    let log_p = tape.log(p);
    let one_minus_p = tape.sub(ones, p)?;
    let log_q = tape.log(one_minus_p);
    let y_term = tape.mul(y, log_p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let q_term = tape.mul(one_minus_y, log_q)?;
    let sum = tape.add(y_term, q_term)?;
    let total = tape.sum_all(sum);
    Ok(tape.scale(total, -1.0 / bsz as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn head(mode: AggregationMode, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> ClassifierHead {
        ClassifierHead::new(mode, 2, 2, true, store, rng)
    }

    #[test]
    fn bi_zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let h = head(AggregationMode::Bi, &mut store, &mut rng);
        store.set_value(h.w, Tensor::zeros(vec![2, 2])).unwrap();
        store
            .set_value(h.b.unwrap(), Tensor::full(vec![2], 0.77))
            .unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(random_tensor(vec![3, 2, 2], &mut rng));
        let s = h.relation_scores(&mut tape, &store, z).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.77));
    }

    #[test]
    fn bi_hand_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let h = head(AggregationMode::Bi, &mut store, &mut rng);
        store
            .set_value(h.w, Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap())
            .unwrap();
        store
            .set_value(h.b.unwrap(), Tensor::new(vec![2], vec![0.1, -0.1]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = h.relation_scores(&mut tape, &store, z).unwrap();
        // class 0: 1·3 + 2·4 + 0.1 ; class 1: −1·5 + 0.5·6 − 0.1
        assert!((tape.value(s).data()[0] - 11.1).abs() < 1e-6);
        assert!((tape.value(s).data()[1] - (-2.1)).abs() < 1e-6);
    }

    #[test]
    fn avg_vs_sum_differ_by_class_count_pre_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let h_sum = ClassifierHead::new(AggregationMode::Sum, 2, 2, false, &mut store, &mut rng);
        let z = random_tensor(vec![2, 2, 2], &mut rng);

        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let s_sum = h_sum.relation_scores(&mut tape, &store, zv).unwrap();

        let h_avg = ClassifierHead {
            mode: AggregationMode::Avg,
            ..h_sum
        };
        let mut tape2 = Tape::new();
        let zv2 = tape2.leaf(z);
        let s_avg = h_avg.relation_scores(&mut tape2, &store, zv2).unwrap();

        for (a, b) in tape.value(s_sum).data().iter().zip(tape2.value(s_avg).data()) {
            assert!((a - 2.0 * b).abs() < 1e-5, "{a} vs 2·{b}");
        }
    }

    #[test]
    fn bi_score_depends_only_on_own_class_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let h = head(AggregationMode::Bi, &mut store, &mut rng);
        let z = random_tensor(vec![1, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let s = h.relation_scores(&mut tape, &store, zv).unwrap();
        let s0 = tape.value(s).data()[0];

        // perturb class 1's vector: class 0's score must not move
        let mut z2 = z;
        z2.data_mut()[2] += 5.0;
        z2.data_mut()[3] -= 3.0;
        let mut tape2 = Tape::new();
        let zv2 = tape2.leaf(z2);
        let s2 = h.relation_scores(&mut tape2, &store, zv2).unwrap();
        assert_eq!(tape2.value(s2).data()[0], s0);
        assert_ne!(tape2.value(s2).data()[1], tape.value(s).data()[1]);
    }

    #[test]
    fn fuse_identity_mean_and_symmetry() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap());
        let s = fuse_scores(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 2.0]);
        let s_rev = fuse_scores(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(s_rev).data(), tape.value(s).data());

        let same = fuse_scores(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());
    }

    #[test]
    fn fuse_gradient_splits_half_half() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.4, -0.6]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let s = fuse_scores(&mut tape, a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5, 0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn bce_at_zero_scores_is_c_ln2() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(vec![3, 4]));
        let y = Tensor::new(
            vec![3, 4],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let loss = bce_loss(&mut tape, s, &y).unwrap();
        let expect = 4.0 * std::f32::consts::LN_2;
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn bce_saturated_correct_limit_vanishes() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap());
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = bce_loss(&mut tape, s, &y).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-6);
        assert!(tape.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn bce_hand_case_via_softplus() {
        // s=[2,−1], y=[1,0] → softplus(−2)+softplus(−1) ≈ 0.440190
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = bce_loss(&mut tape, s, &y).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.440190).abs() < 1e-5);
    }

    #[test]
    fn bce_matches_naive_form_in_safe_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_tensor(vec![2, 3], &mut rng);
            let y = Tensor::new(
                vec![2, 3],
                (0..6)
                    .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
                    .collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let sv = tape.leaf(s);
            let stable = bce_loss(&mut tape, sv, &y).unwrap();
            let naive = bce_loss_naive(&mut tape, sv, &y).unwrap();
            let (a, b) = (
                tape.value(stable).item().unwrap(),
                tape.value(naive).item().unwrap(),
            );
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_labels() {
        // single sample so the mean reduction is a no-op
        let svals = [1.3f32, -0.7, 0.2];
        let yvals = [1.0f32, 0.0, 1.0];
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![1, 3], svals.to_vec()).unwrap());
        let y = Tensor::new(vec![1, 3], yvals.to_vec()).unwrap();
        let loss = bce_loss(&mut tape, s, &y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(s).unwrap();
        for i in 0..3 {
            let sig = 1.0 / (1.0 + (-svals[i]).exp());
            assert!((g[i] - (sig - yvals[i])).abs() < 1e-6, "{}", g[i]);
        }

        // batch of 2: scaled by 1/B
        let mut tape = Tape::new();
        let s2 = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, -1.5]).unwrap());
        let y2 = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let loss2 = bce_loss(&mut tape, s2, &y2).unwrap();
        tape.backward(loss2).unwrap();
        let g2 = tape.grad(s2).unwrap();
        for (i, &sv) in [0.5f32, -1.5].iter().enumerate() {
            let sig = 1.0 / (1.0 + (-sv).exp());
            let expect = (sig - y2.data()[i]) / 2.0;
            assert!((g2[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(vec![1, 2]));
        let y = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            bce_loss(&mut tape, s, &y),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bce_positive_for_finite_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_tensor(vec![1, 4], &mut rng);
            let y = Tensor::new(
                vec![1, 4],
                (0..4)
                    .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
                    .collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let sv = tape.leaf(s);
            let loss = bce_loss(&mut tape, sv, &y).unwrap();
            assert!(tape.value(loss).item().unwrap() > 0.0);
        }
    }
}
