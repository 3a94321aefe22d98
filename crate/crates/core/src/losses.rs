//! Every training objective: the cosine-based bidirectional triplet
//! losses over recipe components and their cross-projections, the
//! Euclidean retrieval triplet with hard-negative mining, the
//! embedding-space adversarial alignment pair (Wasserstein with gradient
//! penalty, or the logistic form), the two translation-consistency
//! families, and the weighted total.
//!
//! All losses are built as tape expressions so one backward pass yields
//! exact gradients; scalar convenience forms exist for reporting.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::encoders::{RecipeEncoder, PROJECTION_PAIRS};
use crate::error::{Result, XmodalError};
use crate::nn::TanhMlp;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    WganGp,
    LogForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    HardestInBatch,
    AllNegatives,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gp_coefficient: f64,
    pub adversarial_form: AdversarialForm,
    pub mining: Mining,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            lambda1: 0.05,
            lambda2: 0.005,
            lambda3: 0.002,
            gp_coefficient: 10.0,
            adversarial_form: AdversarialForm::WganGp,
            mining: Mining::HardestInBatch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(XmodalError::config("loss", "margin must be positive"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.gp_coefficient < 0.0 {
            return Err(XmodalError::config("loss", "weights must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar snapshot of one training step's objectives. The total is
/// always the weighted composition of the parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_ret: f64,
    pub l_ma: f64,
    pub l_r2i: f64,
    pub l_cls_r2i: f64,
    pub l_i2r: f64,
    pub l_cls_i2r: f64,
    pub l_trans_r: f64,
    pub l_trans_i: f64,
    pub l_total: f64,
}

impl LossReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        cfg: &LossConfig,
        l_rec: f64,
        l_ret: f64,
        l_ma: f64,
        l_r2i: f64,
        l_cls_r2i: f64,
        l_i2r: f64,
        l_cls_i2r: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("l_rec", l_rec),
            ("l_ret", l_ret),
            ("l_ma", l_ma),
            ("l_r2i", l_r2i),
            ("l_cls_r2i", l_cls_r2i),
            ("l_i2r", l_i2r),
            ("l_cls_i2r", l_cls_i2r),
        ] {
            if !v.is_finite() {
                return Err(XmodalError::NonFinite { term: name.to_string() });
            }
        }
        let l_trans_r = l_r2i + l_cls_r2i;
        let l_trans_i = l_i2r + l_cls_i2r;
        let l_total = total_of(cfg, l_rec, l_ma, l_trans_r, l_trans_i, l_ret);
        Ok(LossReport {
            l_rec,
            l_ret,
            l_ma,
            l_r2i,
            l_cls_r2i,
            l_i2r,
            l_cls_i2r,
            l_trans_r,
            l_trans_i,
            l_total,
        })
    }

    /// |l_total - recomposition from parts|; zero by construction for
    /// reports built through `compose`.
    pub fn composition_residual(&self, cfg: &LossConfig) -> f64 {
        (self.l_total - total_of(cfg, self.l_rec, self.l_ma, self.l_trans_r, self.l_trans_i, self.l_ret)).abs()
    }
}

pub fn total_of(cfg: &LossConfig, l_rec: f64, l_ma: f64, l_trans_r: f64, l_trans_i: f64, l_ret: f64) -> f64 {
    cfg.lambda1 * l_rec + cfg.lambda2 * l_ma + cfg.lambda3 * (l_trans_r + l_trans_i) + l_ret
}

// ----- plain scalar geometry -----

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(XmodalError::DegenerateInput {
            context: "cosine_similarity",
            msg: "zero vector".to_string(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ----- tape geometry helpers -----

fn batch_dims(t: &Tape, x: NodeId, context: &'static str) -> Result<(usize, usize)> {
    let shape = t.value(x).shape();
    if shape.len() != 2 {
        return Err(XmodalError::validation(context, format!("expected a [B, d] batch, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

fn check_rows_nonzero(t: &Tape, x: NodeId, context: &'static str) -> Result<()> {
    let v = t.value(x);
    for (i, row) in v.axis_iter(Axis(0)).enumerate() {
        let norm2: f64 = row.iter().map(|x| x * x).sum();
        if norm2 < 1e-24 {
            return Err(XmodalError::DegenerateInput {
                context,
                msg: format!("zero embedding at row {i}"),
            });
        }
    }
    Ok(())
}

/// All-pairs cosine: out[i, j] = cos(a_i, b_j), shape [B, B].
pub fn cross_cosine(t: &mut Tape, a: NodeId, b: NodeId, context: &'static str) -> Result<NodeId> {
    check_rows_nonzero(t, a, context)?;
    check_rows_nonzero(t, b, context)?;
    let normalize = |t: &mut Tape, x: NodeId| {
        let sq = t.square(x);
        let sums = t.sum_axis(sq, 1);
        let norms = t.sqrt_eps(sums, 0.0);
        let inv = t.recip(norms);
        t.mul_col(x, inv)
    };
    let an = normalize(t, a);
    let bn = normalize(t, b);
    let bt = t.transpose(bn);
    Ok(t.matmul(an, bt))
}

/// All-pairs Euclidean distance: out[i, j] = d(a_i, b_j), shape [B, B].
pub fn pairwise_distances(t: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let sq_a = t.square(a);
    let na = t.sum_axis(sq_a, 1);
    let sq_b = t.square(b);
    let nb = t.sum_axis(sq_b, 1);
    let bt = t.transpose(b);
    let gram = t.matmul(a, bt);
    let g2 = t.scale(gram, -2.0);
    let with_b = t.add_row(g2, nb);
    let d2 = t.add_col(with_b, na);
    let d2 = t.relu(d2);
    t.sqrt_eps(d2, 1e-12)
}

fn offdiag_mask(t: &mut Tape, b: usize) -> NodeId {
    let mut m = Array2::<f64>::ones((b, b));
    for i in 0..b {
        m[(i, i)] = 0.0;
    }
    t.constant(m.into_dyn())
}

// ----- component alignment losses -----

/// Both hinge terms for one anchor/negative index pair (i, j).
pub fn bidirectional_pair_loss(
    t: &mut Tape,
    e_a: NodeId,
    e_b: NodeId,
    i: usize,
    j: usize,
    margin: f64,
) -> Result<NodeId> {
    let (b, _) = batch_dims(t, e_a, "bidirectional_pair_loss")?;
    if i == j || i >= b || j >= b {
        return Err(XmodalError::validation(
            "bidirectional_pair_loss",
            format!("need distinct in-range indices, got i={i}, j={j}, B={b}"),
        ));
    }
    let c_ab = cross_cosine(t, e_a, e_b, "bidirectional_pair_loss")?;
    let c_ba = t.transpose(c_ab);
    let picked_ab = t.gather_flat(c_ab, &[i * b + j, i * b + i]);
    let picked_ba = t.gather_flat(c_ba, &[i * b + j, i * b + i]);
    let hinge = |t: &mut Tape, pair: NodeId| {
        let neg = t.gather_flat(pair, &[0]);
        let pos = t.gather_flat(pair, &[1]);
        let diff = t.sub(neg, pos);
        let shifted = t.add_scalar(diff, margin);
        t.relu(shifted)
    };
    let h1 = hinge(t, picked_ab);
    let h2 = hinge(t, picked_ba);
    let s = t.add(h1, h2);
    Ok(t.sum_all(s))
}

/// Batch-averaged bidirectional triplet: for each anchor the per-pair
/// hinges are summed over the other indices with 1/B weight, both
/// directions, then averaged over anchors.
pub fn batch_bidirectional_loss(t: &mut Tape, e_a: NodeId, e_b: NodeId, margin: f64) -> Result<NodeId> {
    let (b, da) = batch_dims(t, e_a, "batch_bidirectional_loss")?;
    let (b2, db) = batch_dims(t, e_b, "batch_bidirectional_loss")?;
    if b != b2 || da != db {
        return Err(XmodalError::validation(
            "batch_bidirectional_loss",
            format!("shape mismatch: [{b}, {da}] vs [{b2}, {db}]"),
        ));
    }
    if b < 2 {
        return Err(XmodalError::BatchTooSmall { got: b });
    }
    let c = cross_cosine(t, e_a, e_b, "batch_bidirectional_loss")?;
    let mask = offdiag_mask(t, b);

    let direction = |t: &mut Tape, c: NodeId| {
        let diag = t.diag_part(c);
        let ndiag = t.neg(diag);
        let centered = t.add_col(c, ndiag);
        let shifted = t.add_scalar(centered, margin);
        let hinges = t.relu(shifted);
        t.mul(hinges, mask)
    };
    let h_ab = direction(t, c);
    let ct = t.transpose(c);
    let h_ba = direction(t, ct);
    let total = t.add(h_ab, h_ba);
    let s = t.sum_all(total);
    Ok(t.scale(s, 1.0 / (b * b) as f64))
}

/// Self-supervised component loss: mean over the six ordered component
/// pairs of the batch triplet loss between one component's embeddings
/// and the other's projection into that space.
pub fn recipe_loss(
    t: &mut Tape,
    enc: &RecipeEncoder,
    e_ttl: NodeId,
    e_ing: NodeId,
    e_ins: NodeId,
    margin: f64,
) -> Result<NodeId> {
    let pick = |s: crate::encoders::Space| match s {
        crate::encoders::Space::Ttl => e_ttl,
        crate::encoders::Space::Ing => e_ing,
        crate::encoders::Space::Ins => e_ins,
    };
    let mut acc: Option<NodeId> = None;
    for &(from, to) in PROJECTION_PAIRS.iter() {
        let projected = enc.project(t, pick(from), from, to)?;
        let term = batch_bidirectional_loss(t, pick(to), projected, margin)?;
        acc = Some(match acc {
            None => term,
            Some(a) => t.add(a, term),
        });
    }
    Ok(t.scale(acc.unwrap(), 1.0 / 6.0))
}

// ----- retrieval loss -----

/// Euclidean triplet in retrieval space, both directions summed. Each
/// anchor's positive is its index mate; negatives follow the mining
/// rule; anchors are averaged.
pub fn retrieval_loss(t: &mut Tape, v: NodeId, r: NodeId, margin: f64, mining: Mining) -> Result<NodeId> {
    let (b, dv) = batch_dims(t, v, "retrieval_loss")?;
    let (b2, dr) = batch_dims(t, r, "retrieval_loss")?;
    if b != b2 || dv != dr {
        return Err(XmodalError::validation(
            "retrieval_loss",
            format!("shape mismatch: [{b}, {dv}] vs [{b2}, {dr}]"),
        ));
    }
    if b < 2 {
        return Err(XmodalError::BatchTooSmall { got: b });
    }
    let d = pairwise_distances(t, v, r);
    let dt = t.transpose(d);
    let mask = offdiag_mask(t, b);

    let direction = |t: &mut Tape, dmat: NodeId| {
        let pos = t.diag_part(dmat);
        let nd = t.neg(dmat);
        let centered = t.add_col(nd, pos);
        let shifted = t.add_scalar(centered, margin);
        let hinges = t.relu(shifted);
        let hinges = t.mul(hinges, mask);
        match mining {
            Mining::AllNegatives => {
                let sums = t.sum_axis(hinges, 1);
                let per_anchor = t.scale(sums, 1.0 / (b - 1) as f64);
                t.mean_all(per_anchor)
            }
            Mining::HardestInBatch => {
                let dvals = t.value(dmat).clone();
                let mut sel = Vec::with_capacity(b);
                for i in 0..b {
                    let mut best = usize::MAX;
                    let mut best_d = f64::INFINITY;
                    for j in 0..b {
                        if j != i && dvals[[i, j]] < best_d {
                            best_d = dvals[[i, j]];
                            best = j;
                        }
                    }
                    sel.push(i * b + best);
                }
                let picked = t.gather_flat(hinges, &sel);
                t.mean_all(picked)
            }
        }
    };
    let l_vr = direction(t, d);
    let l_rv = direction(t, dt);
    Ok(t.add(l_vr, l_rv))
}

// ----- modality alignment -----

pub struct MaLosses {
    /// Trains the critic; includes the gradient penalty when present.
    pub critic_loss: NodeId,
    /// The alignment term added into the total objective.
    pub encoder_loss: NodeId,
    pub gradient_penalty: Option<NodeId>,
}

/// Adversarial alignment of recipe embeddings toward image embeddings
/// (images play the "real" side). The Wasserstein form penalizes the
/// critic's input-gradient norm at per-row random interpolates; the
/// logistic form scores both sides against the fooled label.
pub fn modality_alignment_losses(
    t: &mut Tape,
    v: NodeId,
    r: NodeId,
    critic: &TanhMlp,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<MaLosses> {
    let (b, dv) = batch_dims(t, v, "modality_alignment")?;
    let (b2, dr) = batch_dims(t, r, "modality_alignment")?;
    if dv != dr || b != b2 {
        return Err(XmodalError::validation(
            "modality_alignment",
            format!("embedding shapes differ: [{b}, {dv}] vs [{b2}, {dr}]"),
        ));
    }
    if dv != critic.d_in() {
        return Err(XmodalError::validation(
            "modality_alignment",
            format!("critic expects dim {}, embeddings have {dv}", critic.d_in()),
        ));
    }

    match cfg.adversarial_form {
        AdversarialForm::WganGp => {
            let dv_out = critic.forward(t, v);
            let dr_out = critic.forward(t, r);
            let mean_v = t.mean_all(dv_out);
            let mean_r = t.mean_all(dr_out);
            let witness = t.sub(mean_r, mean_v);

            // Interpolates are fixed points (not functions of the
            // encoders): the penalty regularizes the critic only.
            let vv = t.value(v).clone();
            let rv = t.value(r).clone();
            let mut xhat = ArrayD::zeros(IxDyn(&[b, dv]));
            for i in 0..b {
                let eps: f64 = rand::Rng::gen_range(rng, 0.0..1.0);
                for j in 0..dv {
                    xhat[[i, j]] = eps * vv[[i, j]] + (1.0 - eps) * rv[[i, j]];
                }
            }
            let xhat = t.constant(xhat);
            let grad = critic.input_gradient(t, xhat);
            let sq = t.square(grad);
            let sums = t.sum_axis(sq, 1);
            let norms = t.sqrt_eps(sums, 1e-12);
            let deviation = t.add_scalar(norms, -1.0);
            let dev2 = t.square(deviation);
            let gp = t.mean_all(dev2);
            let scaled_gp = t.scale(gp, cfg.gp_coefficient);
            let critic_loss = t.add(witness, scaled_gp);
            let encoder_loss = t.sub(mean_v, mean_r);
            Ok(MaLosses { critic_loss, encoder_loss, gradient_penalty: Some(gp) })
        }
        AdversarialForm::LogForm => {
            let zv = critic.forward(t, v);
            let zr = critic.forward(t, r);
            // log(1 - sigmoid(z)) = -softplus(z); log sigmoid(z) = -softplus(-z).
            let sp_v = t.softplus(zv);
            let sp_r = t.softplus(zr);
            let m_v = t.mean_all(sp_v);
            let m_r = t.mean_all(sp_r);
            let sum = t.add(m_v, m_r);
            let encoder_loss = t.neg(sum);

            let nzv = t.neg(zv);
            let sp_nv = t.softplus(nzv);
            let real_term = t.mean_all(sp_nv);
            let critic_loss = t.add(real_term, m_r);
            Ok(MaLosses { critic_loss, encoder_loss, gradient_penalty: None })
        }
    }
}

// ----- translation consistency -----

/// Cross-entropy of class logits against integer labels.
pub fn class_cross_entropy(t: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, c) = batch_dims(t, logits, "class_cross_entropy")?;
    if labels.len() != b {
        return Err(XmodalError::validation(
            "class_cross_entropy",
            format!("{} labels for batch {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(XmodalError::validation(
            "class_cross_entropy",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let lsm = t.log_softmax_rows(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = t.gather_flat(lsm, &idx);
    let m = t.mean_all(picked);
    Ok(t.neg(m))
}

/// Mean binary cross-entropy of independent sigmoid predictions against
/// a 0/1 target matrix, in the stable softplus(z) - y*z form.
pub fn multilabel_bce(t: &mut Tape, logits: NodeId, targets: &Array2<f64>) -> Result<NodeId> {
    let (b, c) = batch_dims(t, logits, "multilabel_bce")?;
    if targets.dim() != (b, c) {
        return Err(XmodalError::validation(
            "multilabel_bce",
            format!("target shape {:?} does not match logits [{b}, {c}]", targets.dim()),
        ));
    }
    if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(XmodalError::validation("multilabel_bce", "targets must be exactly 0 or 1"));
    }
    let sp = t.softplus(logits);
    let y = t.constant(targets.clone().into_dyn());
    let yz = t.mul(logits, y);
    let per_entry = t.sub(sp, yz);
    Ok(t.mean_all(per_entry))
}

pub struct TransRecipeLosses {
    pub l_r2i: NodeId,
    pub l_cls_r2i: NodeId,
    pub l_trans_r: NodeId,
    /// Trains the image discriminator and (on real images) the category
    /// classifier.
    pub d_loss: NodeId,
}

/// Adversarial + categorical terms for recipe-to-image translation.
/// `d_fake`/`d_real` are raw discriminator outputs on generated and real
/// images; classifier logits likewise. The generator-side adversarial
/// term is least-squares under the Wasserstein default (the embedding
/// critic keeps the Wasserstein form; the image side pairs better with
/// least squares at this scale) and logistic otherwise.
pub fn translation_recipe_losses(
    t: &mut Tape,
    d_fake: NodeId,
    d_real: NodeId,
    cls_fake_logits: NodeId,
    cls_real_logits: NodeId,
    categories: &[usize],
    cfg: &LossConfig,
) -> Result<TransRecipeLosses> {
    let (l_r2i, d_adv) = match cfg.adversarial_form {
        AdversarialForm::WganGp => {
            let shifted_f = t.add_scalar(d_fake, -1.0);
            let sq_f = t.square(shifted_f);
            let l_r2i = t.mean_all(sq_f);

            let shifted_r = t.add_scalar(d_real, -1.0);
            let sq_r = t.square(shifted_r);
            let real_term = t.mean_all(sq_r);
            let sq_f2 = t.square(d_fake);
            let fake_term = t.mean_all(sq_f2);
            (l_r2i, t.add(real_term, fake_term))
        }
        AdversarialForm::LogForm => {
            let sp_real = t.softplus(d_real);
            let m_real = t.mean_all(sp_real);
            let sp_fake = t.softplus(d_fake);
            let m_fake = t.mean_all(sp_fake);
            let s = t.add(m_real, m_fake);
            let l_r2i = t.neg(s);

            let n_real = t.neg(d_real);
            let sp_nr = t.softplus(n_real);
            let rt = t.mean_all(sp_nr);
            (l_r2i, t.add(rt, m_fake))
        }
    };
    let l_cls_r2i = class_cross_entropy(t, cls_fake_logits, categories)?;
    let cls_real = class_cross_entropy(t, cls_real_logits, categories)?;
    let l_trans_r = t.add(l_r2i, l_cls_r2i);
    let d_loss = t.add(d_adv, cls_real);
    Ok(TransRecipeLosses { l_r2i, l_cls_r2i, l_trans_r, d_loss })
}

pub struct TransImageLosses {
    pub l_i2r: NodeId,
    pub l_cls_i2r: NodeId,
    pub l_trans_i: NodeId,
}

/// Ingredient-set prediction and category classification from image
/// embeddings.
pub fn translation_image_losses(
    t: &mut Tape,
    ing_logits: NodeId,
    cls_logits: NodeId,
    multihot: &Array2<f64>,
    categories: &[usize],
) -> Result<TransImageLosses> {
    let l_i2r = multilabel_bce(t, ing_logits, multihot)?;
    let l_cls_i2r = class_cross_entropy(t, cls_logits, categories)?;
    let l_trans_i = t.add(l_i2r, l_cls_i2r);
    Ok(TransImageLosses { l_i2r, l_cls_i2r, l_trans_i })
}

// ----- total objective -----

/// Weighted composition on the tape. Absent terms contribute nothing;
/// the retrieval term is always present.
pub fn total_loss_node(
    t: &mut Tape,
    cfg: &LossConfig,
    l_rec: Option<NodeId>,
    l_ma: Option<NodeId>,
    l_trans_r: Option<NodeId>,
    l_trans_i: Option<NodeId>,
    l_ret: NodeId,
) -> NodeId {
    let mut total = l_ret;
    if let Some(rec) = l_rec {
        let w = t.scale(rec, cfg.lambda1);
        total = t.add(total, w);
    }
    if let Some(ma) = l_ma {
        let w = t.scale(ma, cfg.lambda2);
        total = t.add(total, w);
    }
    match (l_trans_r, l_trans_i) {
        (Some(a), Some(b)) => {
            let s = t.add(a, b);
            let w = t.scale(s, cfg.lambda3);
            total = t.add(total, w);
        }
        (Some(a), None) | (None, Some(a)) => {
            let w = t.scale(a, cfg.lambda3);
            total = t.add(total, w);
        }
        (None, None) => {}
    }
    total
}
