//! Pattern-level decoupling: two encoder branches with classifiers, a pair of
//! cross-pattern probes behind a gradient reversal layer, and the mutual
//! calibration loop that mixes pattern scores through predicate space.
//!
//! The probes try to recover one branch's pattern distribution from the other
//! branch's features; the reversal layer turns their training signal into an
//! opposing update for the branch encoders, so the features drift toward
//! carrying only their own pattern's information.

use rand::{Rng, SeedableRng};

use crate::error::{DllError, Result};
use crate::params::{Bindings, ParameterSet};
use crate::tape::{GradScale, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::PredicateVocabulary;

/// Parameter groups, by name prefix.
pub const GROUP_DECOUPLERS: &[&str] = &["d_a.", "d_s."];
pub const GROUP_PROBES: &[&str] = &["n_a2s.", "n_s2a."];
pub const GROUP_CLASSIFIERS: &[&str] = &["cls_a.", "cls_s."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Input feature width.
    pub d: usize,
    /// Branch feature width.
    pub h: usize,
    pub n_a: usize,
    pub n_s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PDLConfig {
    /// Gradient reversal strength.
    pub lambda: f64,
    /// Mixing weight kept by the pre-calibration score.
    pub eta: f64,
    /// Calibration round-trips per forward pass.
    pub mc_steps: usize,
}

impl Default for PDLConfig {
    fn default() -> Self {
        PDLConfig {
            lambda: 0.13,
            eta: 1e-2,
            mc_steps: 1,
        }
    }
}

impl PDLConfig {
    pub fn validate(&self) -> Result<()> {
        GradScale::new(self.lambda)?;
        if !self.eta.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return Err(DllError::InvalidConfig(format!(
                "eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// The four pattern-space projection matrices of a vocabulary, precomputed.
#[derive(Debug, Clone)]
pub struct MapMatrices {
    pub ma: Tensor,
    pub ms: Tensor,
    pub ia: Tensor,
    pub is: Tensor,
}

impl MapMatrices {
    pub fn new(vocab: &PredicateVocabulary) -> Self {
        let (ma, ms) = vocab.map_matrices();
        let (ia, is) = vocab.inverse_map_matrices();
        MapMatrices { ma, ms, ia, is }
    }

    pub fn insert(&self, tape: &mut Tape) -> MapLeaves {
        MapLeaves {
            ma: tape.leaf(self.ma.clone()),
            ms: tape.leaf(self.ms.clone()),
            ia: tape.leaf(self.ia.clone()),
            is: tape.leaf(self.is.clone()),
        }
    }
}

/// Tape handles for the projection matrices.
#[derive(Debug, Clone, Copy)]
pub struct MapLeaves {
    pub ma: Var,
    pub ms: Var,
    pub ia: Var,
    pub is: Var,
}

/// Decoupled two-branch model.
#[derive(Debug, Clone)]
pub struct PDLModel {
    pub dims: ModelDims,
    pub params: ParameterSet,
}

/// Tape handles for one insertion of the model parameters.
pub struct PdlVars {
    vars: Vec<Var>,
    names: Vec<&'static str>,
}

impl PdlVars {
    fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| *n == name)
            .expect("parameter name is fixed at construction");
        self.vars[i]
    }
}

/// Branch outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PdlForward {
    pub f_a: Var,
    pub f_s: Var,
    pub raw_a: Var,
    pub raw_s: Var,
    pub p_a: Var,
    pub p_s: Var,
}

const PARAM_NAMES: &[&str] = &[
    "d_a.l1.w", "d_a.l1.b", "d_a.l2.w", "d_a.l2.b",
    "d_s.l1.w", "d_s.l1.b", "d_s.l2.w", "d_s.l2.b",
    "n_a2s.l1.w", "n_a2s.l1.b", "n_a2s.l2.w", "n_a2s.l2.b",
    "n_s2a.l1.w", "n_s2a.l1.b", "n_s2a.l2.w", "n_s2a.l2.b",
    "cls_a.w", "cls_a.b", "cls_s.w", "cls_s.b",
];

impl PDLModel {
    /// Seeded init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero
    /// biases, parameters drawn in a fixed registration order.
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.d == 0 || dims.h == 0 || dims.n_a == 0 || dims.n_s == 0 {
            return Err(DllError::InvalidConfig(format!("zero model dimension: {dims:?}")));
        }
        let mut params = ParameterSet::new();
        params.add_affine("d_a.l1", dims.d, dims.h, rng)?;
        params.add_affine("d_a.l2", dims.h, dims.h, rng)?;
        params.add_affine("d_s.l1", dims.d, dims.h, rng)?;
        params.add_affine("d_s.l2", dims.h, dims.h, rng)?;
        params.add_affine("n_a2s.l1", dims.h, dims.h, rng)?;
        params.add_affine("n_a2s.l2", dims.h, dims.h, rng)?;
        params.add_affine("n_s2a.l1", dims.h, dims.h, rng)?;
        params.add_affine("n_s2a.l2", dims.h, dims.h, rng)?;
        params.add_affine("cls_a", dims.h, dims.n_a, rng)?;
        params.add_affine("cls_s", dims.h, dims.n_s, rng)?;
        Ok(PDLModel { dims, params })
    }

    /// All-zero parameters; every head then scores exactly 0.5.
    pub fn new_zeroed(dims: ModelDims) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let mut model = Self::new(dims, &mut rng)?;
        model.zero_parameters();
        Ok(model)
    }

    pub fn zero_parameters(&mut self) {
        for p in self.params.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Rebuild from a restored parameter set, verifying names, order, and
    /// shapes against the architecture.
    pub fn from_params(dims: ModelDims, params: ParameterSet) -> Result<Self> {
        let (d, h, n_a, n_s) = (dims.d, dims.h, dims.n_a, dims.n_s);
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("d_a.l1.w", vec![d, h]), ("d_a.l1.b", vec![h]),
            ("d_a.l2.w", vec![h, h]), ("d_a.l2.b", vec![h]),
            ("d_s.l1.w", vec![d, h]), ("d_s.l1.b", vec![h]),
            ("d_s.l2.w", vec![h, h]), ("d_s.l2.b", vec![h]),
            ("n_a2s.l1.w", vec![h, h]), ("n_a2s.l1.b", vec![h]),
            ("n_a2s.l2.w", vec![h, h]), ("n_a2s.l2.b", vec![h]),
            ("n_s2a.l1.w", vec![h, h]), ("n_s2a.l1.b", vec![h]),
            ("n_s2a.l2.w", vec![h, h]), ("n_s2a.l2.b", vec![h]),
            ("cls_a.w", vec![h, n_a]), ("cls_a.b", vec![n_a]),
            ("cls_s.w", vec![h, n_s]), ("cls_s.b", vec![n_s]),
        ];
        verify_params(&params, &expected)?;
        Ok(PDLModel { dims, params })
    }

    pub fn insert_into_tape(&self, tape: &mut Tape, bindings: &mut Bindings) -> PdlVars {
        let vars = self.params.insert_into_tape(tape, bindings);
        PdlVars {
            vars,
            names: PARAM_NAMES.to_vec(),
        }
    }

    /// Both branches: features, raw pattern scores, sigmoid pattern scores.
    pub fn forward(&self, tape: &mut Tape, vars: &PdlVars, x: Var) -> Result<PdlForward> {
        let branch = |tape: &mut Tape, pre: &str, x: Var| -> Result<Var> {
            let z = tape.affine(x, vars.var(&format!("{pre}.l1.w")), vars.var(&format!("{pre}.l1.b")))?;
            let z = tape.relu(z);
            tape.affine(z, vars.var(&format!("{pre}.l2.w")), vars.var(&format!("{pre}.l2.b")))
        };
        let f_a = branch(tape, "d_a", x)?;
        let f_s = branch(tape, "d_s", x)?;
        let raw_a = tape.affine(f_a, vars.var("cls_a.w"), vars.var("cls_a.b"))?;
        let raw_s = tape.affine(f_s, vars.var("cls_s.w"), vars.var("cls_s.b"))?;
        let p_a = tape.sigmoid(raw_a);
        let p_s = tape.sigmoid(raw_s);
        Ok(PdlForward {
            f_a,
            f_s,
            raw_a,
            raw_s,
            p_a,
            p_s,
        })
    }

    /// Symmetric probe loss: each probe reads the opposite branch's features
    /// through the reversal layer and is scored against the true branch's
    /// (gradient-blocked) class distribution. Probes and the classifiers on the
    /// probe path receive the descending gradient; the branch encoders receive
    /// the lambda-scaled ascending one.
    pub fn adversarial_loss(
        &self,
        tape: &mut Tape,
        vars: &PdlVars,
        fwd: &PdlForward,
        lambda: GradScale,
    ) -> Result<Var> {
        let probe = |tape: &mut Tape, pre: &str, feat: Var, cls: &str| -> Result<Var> {
            let g = tape.grad_reverse(feat, lambda);
            let z = tape.affine(g, vars.var(&format!("{pre}.l1.w")), vars.var(&format!("{pre}.l1.b")))?;
            let z = tape.relu(z);
            let f = tape.affine(z, vars.var(&format!("{pre}.l2.w")), vars.var(&format!("{pre}.l2.b")))?;
            tape.affine(f, vars.var(&format!("{cls}.w")), vars.var(&format!("{cls}.b")))
        };
        let raw_a2s = probe(tape, "n_a2s", fwd.f_a, "cls_s")?;
        let raw_s2a = probe(tape, "n_s2a", fwd.f_s, "cls_a")?;

        let q_a2s = tape.softmax_rows(raw_a2s);
        let t_s = tape.softmax_rows(fwd.raw_s);
        let t_s = tape.detach(t_s);
        let l_a2s = tape.kl_divergence(q_a2s, t_s)?;

        let q_s2a = tape.softmax_rows(raw_s2a);
        let t_a = tape.softmax_rows(fwd.raw_a);
        let t_a = tape.detach(t_a);
        let l_s2a = tape.kl_divergence(q_s2a, t_a)?;

        tape.add(l_a2s, l_s2a)
    }
}

/// Check a restored parameter set against an architecture's expected names
/// (in registration order) and shapes.
pub(crate) fn verify_params(params: &ParameterSet, expected: &[(&str, Vec<usize>)]) -> Result<()> {
    if params.len() != expected.len() {
        return Err(DllError::Checkpoint(format!(
            "restored {} parameters, architecture has {}",
            params.len(),
            expected.len()
        )));
    }
    for (p, (name, shape)) in params.iter().zip(expected) {
        if p.name != *name {
            return Err(DllError::Checkpoint(format!(
                "restored parameter '{}' where '{name}' was expected",
                p.name
            )));
        }
        if p.value.shape() != &shape[..] {
            return Err(DllError::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {shape:?}",
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// Run `mc_steps` rounds of mutual calibration: project pattern scores to
/// predicate space and back, then mix `eta` of the old score with `1 - eta`
/// of the round-tripped one. Differentiable; `mc_steps = 0` is the identity.
pub fn mutual_calibrate(
    tape: &mut Tape,
    p_a: Var,
    p_s: Var,
    maps: &MapLeaves,
    cfg: &PDLConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (mut p_a, mut p_s) = (p_a, p_s);
    for _ in 0..cfg.mc_steps {
        let from_a = tape.matmul(p_a, maps.ma)?;
        let from_s = tape.matmul(p_s, maps.ms)?;
        let p = tape.add(from_a, from_s)?;
        let cal_a = tape.matmul(p, maps.ia)?;
        let cal_s = tape.matmul(p, maps.is)?;
        let keep_a = tape.scale(p_a, cfg.eta);
        let mixed_a = tape.scale(cal_a, 1.0 - cfg.eta);
        p_a = tape.add(keep_a, mixed_a)?;
        let keep_s = tape.scale(p_s, cfg.eta);
        let mixed_s = tape.scale(cal_s, 1.0 - cfg.eta);
        p_s = tape.add(keep_s, mixed_s)?;
    }
    Ok((p_a, p_s))
}

/// Full inference path: forward, mutual calibration, projection to predicate
/// scores. Probes never run here. Returns the predicate scores and the
/// post-calibration branch outputs.
pub fn predict(
    model: &PDLModel,
    tape: &mut Tape,
    vars: &PdlVars,
    x: Var,
    maps: &MapLeaves,
    cfg: &PDLConfig,
) -> Result<(Var, PdlForward)> {
    let fwd = model.forward(tape, vars, x)?;
    let (p_a, p_s) = mutual_calibrate(tape, fwd.p_a, fwd.p_s, maps, cfg)?;
    let from_a = tape.matmul(p_a, maps.ma)?;
    let from_s = tape.matmul(p_s, maps.ms)?;
    let p = tape.add(from_a, from_s)?;
    Ok((
        p,
        PdlForward {
            p_a,
            p_s,
            ..fwd
        },
    ))
}
