//! Training objectives: symmetric InfoNCE, STI distillation, batch
//! self-distillation and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::sti::StiDistributions;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_s: 1.0,
            lambda_d: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!(
                "temperature {} must be positive",
                self.temperature
            ));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_d >= 0.0) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        Ok(())
    }
}

fn square(s: &Tensor, what: &str) -> Result<usize> {
    match s.shape() {
        [a, b] if a == b => Ok(*a),
        sh => Err(shape_err!("{what}: expected a square matrix, got {sh:?}")),
    }
}

fn identity(b: usize) -> Result<Tensor> {
    let mut v = vec![0.0; b * b];
    (0..b).for_each(|i| v[i * b + i] = 1.0);
    Tensor::new(v, &[b, b])
}

/// `L_t2m + L_m2t`: cross-entropy of the row softmax and the column softmax
/// of `S/τ` against the diagonal, each averaged over the batch.
pub fn info_nce(s: &Tensor, temperature: f64) -> Result<Tensor> {
    let b = square(s, "info_nce")?;
    if b < 2 {
        return Err(invalid!(
            "contrastive loss needs a batch of at least 2, got {b}"
        ));
    }
    let logits = s.scale(1.0 / temperature);
    let eye = identity(b)?;
    let rows = logits.log_softmax(1)?.mul(&eye)?.sum();
    let cols = logits.log_softmax(0)?.mul(&eye)?.sum();
    Ok(rows.add(&cols)?.scale(-1.0 / b as f64))
}

/// `Σ p ln(p / q)` with `q` floored at [`LOG_EPS`] and `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(shape_err!(
            "kl_divergence: lengths {} and {}",
            p.len(),
            q.len()
        ));
    }
    if p.iter().chain(q).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(invalid!("distributions must be finite and non-negative"));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(LOG_EPS).ln()))
        .sum())
}

/// `Σ p·(ln p − log_q)` for a constant target `p` laid out like `log_q`.
fn kl_to_log_probs(p: &[f64], log_q: &Tensor) -> Result<Tensor> {
    let entropy: f64 = p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
    let target = Tensor::new(p.to_vec(), log_q.shape())?;
    Ok(log_q.mul(&target)?.sum().scale(-1.0).add_scalar(entropy))
}

/// STI distillation for one pair: mean over motion tokens of
/// `KL(teacher m2t ‖ student m2t)` plus mean over text tokens of
/// `KL(teacher t2m ‖ student t2m)`. `student_logits` is `N_t × N_m`; the
/// teacher is constant.
pub fn sti_distillation(teacher: &StiDistributions, student_logits: &Tensor) -> Result<Tensor> {
    let (nt, nm) = match student_logits.shape() {
        [a, b] => (*a, *b),
        s => return Err(shape_err!("student grid must be a matrix, got {s:?}")),
    };
    if teacher.m2t.len() != nm
        || teacher.t2m.len() != nt
        || teacher.m2t.iter().any(|c| c.len() != nt)
    {
        return Err(shape_err!(
            "teacher distributions do not match a {nt}x{nm} student grid"
        ));
    }
    // m2t columns live along axis 0 of the student grid.
    let mut m2t = vec![0.0; nt * nm];
    for (j, col) in teacher.m2t.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m2t[i * nm + j] = *v;
        }
    }
    let t2m = teacher.t2m.concat();
    let col_term = kl_to_log_probs(&m2t, &student_logits.log_softmax(0)?)?.scale(1.0 / nm as f64);
    let row_term = kl_to_log_probs(&t2m, &student_logits.log_softmax(1)?)?.scale(1.0 / nt as f64);
    col_term.add(&row_term)
}

/// Student distributions implied by a logit grid.
pub fn student_distributions(logits: &Tensor) -> Result<StiDistributions> {
    let grid = crate::sti::StiGrid::new(logits.rows(), logits.cols(), logits.to_vec())?;
    crate::sti::sti_distributions(&grid)
}

/// `KL(rowsoftmax(S_sgm/τ) ‖ rowsoftmax(S_jnt/τ))` averaged over rows, plus
/// the same over columns. The joint-stage matrix is the (detached) teacher.
pub fn self_distillation(s_jnt: &Tensor, s_sgm: &Tensor, temperature: f64) -> Result<Tensor> {
    let b = square(s_sgm, "self_distillation")?;
    if s_jnt.shape() != s_sgm.shape() {
        return Err(shape_err!(
            "self_distillation: shapes {:?} and {:?} differ",
            s_jnt.shape(),
            s_sgm.shape()
        ));
    }
    let teacher = s_jnt.detach().scale(1.0 / temperature);
    let student = s_sgm.scale(1.0 / temperature);
    let term = |axis: usize| -> Result<Tensor> {
        let log_p = student.log_softmax(axis)?;
        let log_q = teacher.log_softmax(axis)?;
        let p = student.softmax(axis)?;
        Ok(p.mul(&log_p.sub(&log_q)?)?.sum().scale(1.0 / b as f64))
    };
    term(1)?.add(&term(0)?)
}

/// Per-component values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub jnt: f64,
    pub sgm: f64,
    pub hlt: f64,
    pub sd: f64,
    pub d: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,loss_total,loss_jnt,loss_sgm,loss_hlt,loss_sd,loss_d";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.total, self.jnt, self.sgm, self.hlt, self.sd, self.d
        )
    }
}

/// Differentiable loss components.
pub struct LossTerms {
    pub jnt: Tensor,
    pub sgm: Tensor,
    pub hlt: Tensor,
    pub sd_jnt: Tensor,
    pub sd_sgm: Tensor,
    pub d: Tensor,
}

/// `L_jnt + L_sgm + L_hlt + λ_S (SD_jnt + SD_sgm) + λ_D L_D`.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    let parts = [
        &terms.jnt,
        &terms.sgm,
        &terms.hlt,
        &terms.sd_jnt,
        &terms.sd_sgm,
        &terms.d,
    ];
    for (t, name) in parts
        .iter()
        .zip(["jnt", "sgm", "hlt", "sd_jnt", "sd_sgm", "d"])
    {
        if t.numel() != 1 {
            return Err(shape_err!("loss term {name} is not a scalar"));
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let sd = terms.sd_jnt.add(&terms.sd_sgm)?;
    let total = terms
        .jnt
        .add(&terms.sgm)?
        .add(&terms.hlt)?
        .add(&sd.scale(cfg.lambda_s))?
        .add(&terms.d.scale(cfg.lambda_d))?;
    let breakdown = LossBreakdown {
        total: total.item(),
        jnt: terms.jnt.item(),
        sgm: terms.sgm.item(),
        hlt: terms.hlt.item(),
        sd: sd.item(),
        d: terms.d.item(),
    };
    Ok((total, breakdown))
}
