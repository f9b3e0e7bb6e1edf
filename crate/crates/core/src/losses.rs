//! Training objectives: softmax cross-entropy against a learnable classifier
//! or frozen prototypes, the cosine alignment term, the aligned-compatible
//! (ACE) combination, the full OCA objective and the BCT baseline.
//!
//! Every batch loss is a mean over rows. Gradients are returned with respect
//! to the features (and the learnable classifier where there is one); frozen
//! prototypes never receive a gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{numeric, structural, Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{Classifier, OrthoLayer};
use crate::trainer::Prototypes;

/// Training objective for the new model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Independent,
    Bct,
    Oca,
    OcaNoOrtho,
    OcaNoCos,
    OcaNoOrthoNoCos,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Independent,
        Mode::Bct,
        Mode::Oca,
        Mode::OcaNoOrtho,
        Mode::OcaNoCos,
        Mode::OcaNoOrthoNoCos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Independent => "independent",
            Mode::Bct => "bct",
            Mode::Oca => "oca",
            Mode::OcaNoOrtho => "oca_no_ortho",
            Mode::OcaNoCos => "oca_no_cos",
            Mode::OcaNoOrthoNoCos => "oca_no_ortho_no_cos",
        }
    }

    /// Trains on the expanded `[h_bct | h_e]` embedding.
    pub fn is_oca(self) -> bool {
        matches!(
            self,
            Mode::Oca | Mode::OcaNoOrtho | Mode::OcaNoCos | Mode::OcaNoOrthoNoCos
        )
    }

    pub fn uses_ortho(self) -> bool {
        matches!(self, Mode::Oca | Mode::OcaNoCos)
    }

    pub fn uses_cos(self) -> bool {
        matches!(self, Mode::Oca | Mode::OcaNoOrtho)
    }

    pub fn needs_prototypes(self) -> bool {
        self != Mode::Independent
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| structural(format!("unknown mode `{s}`")))
    }
}

/// Mode plus loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: Mode,
    /// Weight of the prototype cross-entropy inside ACE.
    pub lambda1: f64,
    /// Weight of the cosine alignment term inside ACE.
    pub lambda2: f64,
    /// Influence-loss weight of the BCT baseline.
    pub lambda_bct: f64,
}

impl LossSpec {
    pub fn new(mode: Mode, lambda1: f64, lambda2: f64, lambda_bct: f64) -> Result<Self> {
        let spec = Self {
            mode,
            lambda1,
            lambda2,
            lambda_bct,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_bct", self.lambda_bct),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(structural(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Cosine weight after applying the mode's ablation.
    pub fn effective_lambda2(&self) -> f64 {
        if self.mode.uses_cos() {
            self.lambda2
        } else {
            0.0
        }
    }
}

/// Loss value split into its terms (unweighted components).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_new: f64,
    pub ce_proto: f64,
    pub cos_align: f64,
}

impl LossBreakdown {
    /// Recombines the components with the mode's weights.
    pub fn reconstruct(&self, spec: &LossSpec) -> f64 {
        match spec.mode {
            Mode::Independent => self.ce_new,
            Mode::Bct => self.ce_new + spec.lambda_bct * self.ce_proto,
            _ => {
                self.ce_new
                    + spec.lambda1 * self.ce_proto
                    + spec.effective_lambda2() * self.cos_align
            }
        }
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.ce_new += weight * other.ce_new;
        self.ce_proto += weight * other.ce_proto;
        self.cos_align += weight * other.cos_align;
    }
}

/// Loss and gradient with respect to the input features only.
#[derive(Debug, Clone)]
pub struct FeatureLoss {
    pub loss: f64,
    pub grad_h: Matrix,
}

/// Cross-entropy against a learnable classifier.
#[derive(Debug, Clone)]
pub struct ClassifierLoss {
    pub loss: f64,
    pub grad_h: Matrix,
    pub grad_w: Matrix,
}

/// Combined objective with gradients for every trainable input.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Gradient with respect to the backbone output.
    pub grad_h: Matrix,
    pub grad_w: Matrix,
    /// Gradient with respect to `Q`, present when the orthogonal layer is used.
    pub grad_q: Option<Matrix>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(structural(format!(
            "{} labels for {rows} feature rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(structural(format!(
            "label {y} at row {i} has no {what} (only {classes} classes)"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy with logits `h · Wᵀ`; returns the loss and
/// `∂L/∂logits`.
fn softmax_ce(h: &Matrix, w: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if h.cols() != w.cols() {
        return Err(structural(format!(
            "feature dim {} does not match classifier dim {}",
            h.cols(),
            w.cols()
        )));
    }
    let n = h.rows();
    if n == 0 {
        return Err(structural("empty batch"));
    }
    let mut grad = h.matmul_nt(w)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        // -log p_y = log(sum) - (z_y - max)
        loss += sum.ln() - row[y].ln();
        for v in row.iter_mut() {
            *v *= inv_n / sum;
        }
        row[y] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(numeric("cross-entropy is not finite"));
    }
    Ok((loss, grad))
}

/// Cross-entropy through the learnable classifier `W`.
pub fn ce_learnable(h: &Matrix, labels: &[usize], w: &Classifier) -> Result<ClassifierLoss> {
    let weight = w.weight();
    check_labels(labels, h.rows(), weight.rows(), "classifier row")?;
    let (loss, grad_logits) = softmax_ce(h, weight, labels)?;
    Ok(ClassifierLoss {
        loss,
        grad_h: grad_logits.matmul(weight)?,
        grad_w: grad_logits.matmul_tn(h)?,
    })
}

/// Cross-entropy against frozen prototypes used as classifier rows.
pub fn ce_prototypes(h_bct: &Matrix, labels: &[usize], w_old: &Prototypes) -> Result<FeatureLoss> {
    let vectors = w_old.vectors();
    check_labels(labels, h_bct.rows(), vectors.rows(), "prototype")?;
    let (loss, grad_logits) = softmax_ce(h_bct, vectors, labels)?;
    Ok(FeatureLoss {
        loss,
        grad_h: grad_logits.matmul(vectors)?,
    })
}

/// Mean cosine distance `1 − cos(h, W_old[y])` to each row's own prototype.
pub fn cos_align(h_bct: &Matrix, labels: &[usize], w_old: &Prototypes) -> Result<FeatureLoss> {
    let vectors = w_old.vectors();
    check_labels(labels, h_bct.rows(), vectors.rows(), "prototype")?;
    if h_bct.cols() != vectors.cols() {
        return Err(structural(format!(
            "feature dim {} does not match prototype dim {}",
            h_bct.cols(),
            vectors.cols()
        )));
    }
    let n = h_bct.rows();
    if n == 0 {
        return Err(structural("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, h_bct.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let h = h_bct.row(i);
        let p = vectors.row(y);
        let hn = norm(h);
        let pn = norm(p);
        if hn == 0.0 {
            return Err(numeric(format!("zero-norm feature at row {i}")));
        }
        if pn == 0.0 {
            return Err(numeric(format!(
                "zero-norm prototype for class {y} (row {i})"
            )));
        }
        let c = dot(h, p) / (hn * pn);
        loss += 1.0 - c;
        // d(1 - c)/dh = -(p / (|h||p|) - c h / |h|²)
        for ((g, &hv), &pv) in grad.row_mut(i).iter_mut().zip(h).zip(p) {
            *g = -inv_n * (pv / (hn * pn) - c * hv / (hn * hn));
        }
    }
    Ok(FeatureLoss {
        loss: loss * inv_n,
        grad_h: grad,
    })
}

/// ACE term on the compatible slice.
#[derive(Debug, Clone)]
pub struct AceOutput {
    pub total: f64,
    pub ce_proto: f64,
    pub cos_align: f64,
    pub grad_h_bct: Matrix,
}

/// `λ1 · ce_prototypes + λ2 · cos_align`. A term whose weight is zero is
/// not evaluated and reports 0.
pub fn ace_loss(
    h_bct: &Matrix,
    labels: &[usize],
    w_old: &Prototypes,
    lambda1: f64,
    lambda2: f64,
) -> Result<AceOutput> {
    let mut grad = Matrix::zeros(h_bct.rows(), h_bct.cols());
    let mut ce = 0.0;
    let mut cos = 0.0;
    if lambda1 != 0.0 {
        let out = ce_prototypes(h_bct, labels, w_old)?;
        ce = out.loss;
        let mut g = out.grad_h;
        g.scale(lambda1);
        grad.add_assign(&g)?;
    }
    if lambda2 != 0.0 {
        let out = cos_align(h_bct, labels, w_old)?;
        cos = out.loss;
        let mut g = out.grad_h;
        g.scale(lambda2);
        grad.add_assign(&g)?;
    }
    Ok(AceOutput {
        total: lambda1 * ce + lambda2 * cos,
        ce_proto: ce,
        cos_align: cos,
        grad_h_bct: grad,
    })
}

fn slice_cols(m: &Matrix, cols: usize) -> Matrix {
    m.block(0, 0, m.rows(), cols)
}

/// Full OCA objective: cross-entropy of `T⊥(h_new)` through `W` plus ACE on
/// the first `d_old` coordinates of `h_new`.
///
/// `ortho` is required by modes that use the orthogonal layer and ignored by
/// the others.
pub fn oca_total(
    h_new: &Matrix,
    ortho: Option<&OrthoLayer>,
    labels: &[usize],
    w: &Classifier,
    w_old: &Prototypes,
    spec: &LossSpec,
) -> Result<LossOutput> {
    spec.validate()?;
    if !spec.mode.is_oca() {
        return Err(structural(format!(
            "oca_total called with mode {}",
            spec.mode
        )));
    }
    let d_old = w_old.dim();
    if d_old >= h_new.cols() {
        return Err(structural(format!(
            "embedding dim {} leaves no extra space beyond d_old = {d_old}",
            h_new.cols()
        )));
    }
    let q = if spec.mode.uses_ortho() {
        let layer = ortho
            .ok_or_else(|| structural(format!("mode {} needs an orthogonal layer", spec.mode)))?;
        if layer.dim() != h_new.cols() {
            return Err(structural(format!(
                "orthogonal layer dim {} does not match embedding dim {}",
                layer.dim(),
                h_new.cols()
            )));
        }
        Some(layer.q())
    } else {
        None
    };

    let (ce, grad_h, grad_q) = match q {
        Some(q) => {
            let h_perp = h_new.matmul_nt(q)?;
            let ce = ce_learnable(&h_perp, labels, w)?;
            // h_perp = h Qᵀ, so dh = dh_perp Q and dQ = dh_perpᵀ h
            let grad_h = ce.grad_h.matmul(q)?;
            let grad_q = ce.grad_h.matmul_tn(h_new)?;
            (ce, grad_h, Some(grad_q))
        }
        None => {
            let ce = ce_learnable(h_new, labels, w)?;
            let grad_h = ce.grad_h.clone();
            (ce, grad_h, None)
        }
    };

    let h_bct = slice_cols(h_new, d_old);
    let ace = ace_loss(
        &h_bct,
        labels,
        w_old,
        spec.lambda1,
        spec.effective_lambda2(),
    )?;
    let mut grad_h = grad_h;
    for i in 0..grad_h.rows() {
        for (g, a) in grad_h.row_mut(i)[..d_old]
            .iter_mut()
            .zip(ace.grad_h_bct.row(i))
        {
            *g += a;
        }
    }
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: ce.loss + ace.total,
            ce_new: ce.loss,
            ce_proto: ace.ce_proto,
            cos_align: ace.cos_align,
        },
        grad_h,
        grad_w: ce.grad_w,
        grad_q,
    })
}

/// BCT baseline: `ce_learnable + λ · ce_prototypes` on the unexpanded
/// embedding.
pub fn bct_loss(
    h: &Matrix,
    labels: &[usize],
    w: &Classifier,
    w_old: &Prototypes,
    lambda_bct: f64,
) -> Result<LossOutput> {
    if h.cols() != w_old.dim() {
        return Err(structural(format!(
            "BCT embedding dim {} must equal prototype dim {}",
            h.cols(),
            w_old.dim()
        )));
    }
    let ce = ce_learnable(h, labels, w)?;
    let mut grad_h = ce.grad_h;
    let mut ce_proto = 0.0;
    if lambda_bct != 0.0 {
        let infl = ce_prototypes(h, labels, w_old)?;
        ce_proto = infl.loss;
        let mut g = infl.grad_h;
        g.scale(lambda_bct);
        grad_h.add_assign(&g)?;
    }
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: ce.loss + lambda_bct * ce_proto,
            ce_new: ce.loss,
            ce_proto,
            cos_align: 0.0,
        },
        grad_h,
        grad_w: ce.grad_w,
        grad_q: None,
    })
}

/// Dispatches to the objective selected by `spec.mode`.
pub fn mode_loss(
    h: &Matrix,
    ortho: Option<&OrthoLayer>,
    labels: &[usize],
    w: &Classifier,
    w_old: Option<&Prototypes>,
    spec: &LossSpec,
) -> Result<LossOutput> {
    spec.validate()?;
    let need_protos =
        || w_old.ok_or_else(|| structural(format!("mode {} needs prototypes", spec.mode)));
    match spec.mode {
        Mode::Independent => {
            let ce = ce_learnable(h, labels, w)?;
            Ok(LossOutput {
                breakdown: LossBreakdown {
                    total: ce.loss,
                    ce_new: ce.loss,
                    ..Default::default()
                },
                grad_h: ce.grad_h,
                grad_w: ce.grad_w,
                grad_q: None,
            })
        }
        Mode::Bct => bct_loss(h, labels, w, need_protos()?, spec.lambda_bct),
        _ => oca_total(h, ortho, labels, w, need_protos()?, spec),
    }
}
