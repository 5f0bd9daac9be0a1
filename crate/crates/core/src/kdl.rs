//! Knowledge-level decoupling: a learnable class-correlation matrix trained
//! from the model's own predictions, and a transfer loss that pulls each
//! predicate's predicted distribution toward the correlation row of its most
//! frequent pattern-sharing neighbor.
//!
//! Both losses compare masked, renormalized distributions: position `k` (the
//! label under consideration) is excluded and the rest softmax-normalized, so
//! a row only speaks about the *other* classes.

use crate::error::{DllError, Result};
use crate::params::{Bindings, ParameterSet};
use crate::tape::{Tape, Var, CLAMP_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KDLConfig {
    /// Transfer weight during warmup.
    pub alpha0: f64,
    /// Per-iteration transfer weight growth after warmup.
    pub beta: f64,
    pub warmup_epochs: usize,
    /// Base of the per-epoch decay applied to the whole branch.
    pub gamma_base: f64,
}

impl Default for KDLConfig {
    fn default() -> Self {
        KDLConfig {
            alpha0: 0.1,
            beta: 1e-4,
            warmup_epochs: 10,
            gamma_base: 0.99,
        }
    }
}

impl KDLConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha0", self.alpha0),
            ("beta", self.beta),
            ("gamma_base", self.gamma_base),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DllError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Transfer weight at a given epoch and global iteration. Constant at `alpha0`
/// through the warmup epochs, then grows linearly with the iteration counter
/// (which does not reset at epoch boundaries).
pub fn alpha_at(cfg: &KDLConfig, epoch: usize, iteration: u64) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.alpha0
    } else {
        cfg.alpha0 + cfg.beta * iteration as f64
    }
}

/// Per-epoch decay of the knowledge branch.
pub fn gamma_at(cfg: &KDLConfig, epoch: usize) -> f64 {
    cfg.gamma_base.powi(epoch as i32)
}

/// Learnable class-correlation matrix, identity at init. Kept in its own
/// parameter set so the correlation update can step it in isolation.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    params: ParameterSet,
    n_p: usize,
}

pub const CM_PARAM: &str = "cm";

impl CorrelationMatrix {
    pub fn new(n_p: usize) -> Result<Self> {
        if n_p < 2 {
            return Err(DllError::InvalidConfig(format!(
                "correlation matrix needs at least 2 classes, got {n_p}"
            )));
        }
        let mut m = Tensor::zeros(&[n_p, n_p]);
        for i in 0..n_p {
            m.data_mut()[i * n_p + i] = 1.0;
        }
        let mut params = ParameterSet::new();
        params.add(CM_PARAM, m)?;
        Ok(CorrelationMatrix { params, n_p })
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn value(&self) -> &Tensor {
        &self.params.get(CM_PARAM).expect("fixed name").value
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn insert_into_tape(&self, tape: &mut Tape, bindings: &mut Bindings) -> Var {
        self.params.insert_into_tape(tape, bindings)[0]
    }

    /// Rebuild from a restored parameter set: exactly one square matrix under
    /// the fixed name.
    pub fn from_params(params: ParameterSet) -> Result<Self> {
        let Some(p) = params.get(CM_PARAM) else {
            return Err(DllError::Checkpoint(format!(
                "correlation set is missing '{CM_PARAM}'"
            )));
        };
        if params.len() != 1 {
            return Err(DllError::Checkpoint(format!(
                "correlation set holds {} parameters, expected 1",
                params.len()
            )));
        }
        let shape = p.value.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(DllError::Checkpoint(format!(
                "correlation matrix has shape {shape:?}, expected square"
            )));
        }
        let n_p = shape[0];
        Ok(CorrelationMatrix { params, n_p })
    }
}

/// Value-level mirror of the masked softmax tape op: softmax over all
/// positions except `k`, with position `k` exactly zero in the output.
pub fn mask_and_normalize(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(DllError::InvalidArgument {
            op: "mask_and_normalize".into(),
            detail: format!("need at least 2 entries, got {}", values.len()),
        });
    }
    if k >= values.len() {
        return Err(DllError::InvalidArgument {
            op: "mask_and_normalize".into(),
            detail: format!("mask index {k} out of range for length {}", values.len()),
        });
    }
    let max = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; values.len()];
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if i != k {
            out[i] = (v - max).exp();
            sum += out[i];
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if i != k {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Binary cross-entropy of predicted predicate scores against 0/1 targets.
/// Every target row must contain at least one positive.
pub fn target_loss(tape: &mut Tape, p: Var, q: &Tensor) -> Result<Var> {
    for i in 0..q.rows() {
        if q.row(i).iter().all(|&v| v == 0.0) {
            return Err(DllError::InvalidArgument {
                op: "target_loss".into(),
                detail: format!("target row {i} has no positive labels"),
            });
        }
    }
    tape.bce_loss(p, q)
}

/// Fit the correlation matrix to the model's current predictions: for every
/// (sample, positive label k) pair, pull the masked row `k` of the matrix
/// toward the masked log-odds of the sample's predicted scores. The prediction
/// side is gradient-blocked, so only the matrix learns. Mean over all pairs.
pub fn correlation_update_loss(
    tape: &mut Tape,
    m: Var,
    p: Var,
    labels: &[Vec<usize>],
) -> Result<Var> {
    let (terms, n_p) = check_label_shapes(tape, m, p, labels)?;
    if terms == 0 {
        return Err(DllError::InvalidArgument {
            op: "correlation_update_loss".into(),
            detail: "no labeled samples in batch".into(),
        });
    }
    let mut total: Option<Var> = None;
    for (b, ks) in labels.iter().enumerate() {
        for &k in ks {
            debug_assert!(k < n_p);
            let m_row = tape.row(m, k)?;
            let m_masked = tape.masked_softmax(m_row, k)?;
            let p_row = tape.row(p, b)?;
            let p_row = tape.detach(p_row);
            let p_logit = tape.logit(p_row);
            let p_masked = tape.masked_softmax(p_logit, k)?;
            let term = tape.kl_divergence(m_masked, p_masked)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(tape.scale(total.expect("terms > 0"), 1.0 / terms as f64))
}

/// Pull each sample's predicted distribution toward the correlation row of the
/// label's header class. The matrix side is gradient-blocked, so only the
/// model learns. Pairs whose label has no header contribute zero but still
/// count toward the mean.
pub fn knowledge_transfer_loss(
    tape: &mut Tape,
    m: Var,
    p: Var,
    labels: &[Vec<usize>],
    headers: &[Option<usize>],
) -> Result<Var> {
    let (terms, n_p) = check_label_shapes(tape, m, p, labels)?;
    if headers.len() != n_p {
        return Err(DllError::ShapeMismatch {
            op: "knowledge_transfer_loss".into(),
            detail: format!("{} header entries for {n_p} classes", headers.len()),
        });
    }
    if terms == 0 {
        return Err(DllError::InvalidArgument {
            op: "knowledge_transfer_loss".into(),
            detail: "no labeled samples in batch".into(),
        });
    }
    let mut total: Option<Var> = None;
    for (b, ks) in labels.iter().enumerate() {
        for &k in ks {
            let Some(h) = headers[k] else { continue };
            let p_row = tape.row(p, b)?;
            let p_logit = tape.logit(p_row);
            let p_masked = tape.masked_softmax(p_logit, k)?;
            let m_row = tape.row(m, h)?;
            let m_row = tape.detach(m_row);
            let m_masked = tape.masked_softmax(m_row, k)?;
            let term = tape.kl_divergence(p_masked, m_masked)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    let sum = match total {
        Some(t) => t,
        // Every label headerless: the loss is exactly zero, with no gradient.
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(sum, 1.0 / terms as f64))
}

/// Joint objective for single-model training: `l_t + l_cm + alpha * l_nt`.
pub fn combined_loss(
    tape: &mut Tape,
    l_t: Var,
    l_cm: Var,
    l_nt: Var,
    alpha: f64,
) -> Result<Var> {
    let scaled = tape.scale(l_nt, alpha);
    let partial = tape.add(l_t, l_cm)?;
    tape.add(partial, scaled)
}

fn check_label_shapes(
    tape: &Tape,
    m: Var,
    p: Var,
    labels: &[Vec<usize>],
) -> Result<(usize, usize)> {
    let pv = tape.value(p);
    let mv = tape.value(m);
    let n_p = pv.cols();
    if mv.shape() != [n_p, n_p] {
        return Err(DllError::ShapeMismatch {
            op: "kdl".into(),
            detail: format!(
                "correlation matrix {:?} does not match {n_p} predicate scores",
                mv.shape()
            ),
        });
    }
    if labels.len() != pv.rows() {
        return Err(DllError::ShapeMismatch {
            op: "kdl".into(),
            detail: format!("{} label rows for {} score rows", labels.len(), pv.rows()),
        });
    }
    let mut terms = 0;
    for ks in labels {
        for &k in ks {
            if k >= n_p {
                return Err(DllError::InvalidArgument {
                    op: "kdl".into(),
                    detail: format!("label index {k} out of range for {n_p} classes"),
                });
            }
            terms += 1;
        }
    }
    Ok((terms, n_p))
}

/// Guard against predictions outside the open unit interval reaching the
/// log-odds clamp unnoticed; scores at exactly 0 or 1 are legal inputs and
/// clamp to the epsilon boundary.
pub fn logit_clamp_bounds() -> (f64, f64) {
    (CLAMP_EPS, 1.0 - CLAMP_EPS)
}
