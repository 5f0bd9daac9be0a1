//! The training loop and its orchestration: mode dispatch, the fixed
//! per-iteration update order, epoch evaluation, checkpointing, and run
//! comparison.
//!
//! Every update builds a fresh tape and runs its own forward pass, so updates
//! within an iteration see each other's parameter steps exactly in sequence.
//! Batch order at epoch `e` comes from an RNG stream derived from the seed and
//! `e`, never from carried RNG state, which makes a resumed run bit-identical
//! to an unbroken one.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig, Mode};
use crate::data::{generate, head_tail_partition, load_records, SegmentRecord};
use crate::error::{DllError, Result};
use crate::kdl::{
    alpha_at, combined_loss, correlation_update_loss, gamma_at, knowledge_transfer_loss,
    target_loss, CorrelationMatrix,
};
use crate::metrics::{
    append_metrics_rows, compute_report, per_class_csv, subset_mean_recall, MetricsReport,
    RankedPrediction, TruthMap, METRICS_CSV_HEADER,
};
use crate::params::{Bindings, ParameterSet};
use crate::pdl::{
    predict, verify_params, MapMatrices, ModelDims, PDLModel, GROUP_CLASSIFIERS,
    GROUP_DECOUPLERS, GROUP_PROBES,
};
use crate::tape::{GradScale, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::PredicateVocabulary;

/// Undecoupled reference model: one branch-shaped encoder with a single
/// all-class head.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub dims: JointDims,
    pub params: ParameterSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointDims {
    pub d: usize,
    pub h: usize,
    pub n_p: usize,
}

const JOINT_PARAM_NAMES: &[&str] = &[
    "enc.l1.w", "enc.l1.b", "enc.l2.w", "enc.l2.b", "head.w", "head.b",
];

pub struct JointVars {
    vars: Vec<Var>,
}

impl JointVars {
    fn var(&self, name: &str) -> Var {
        let i = JOINT_PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .expect("parameter name is fixed at construction");
        self.vars[i]
    }
}

impl JointModel {
    pub fn new<R: Rng>(dims: JointDims, rng: &mut R) -> Result<Self> {
        if dims.d == 0 || dims.h == 0 || dims.n_p == 0 {
            return Err(DllError::InvalidConfig(format!("zero model dimension: {dims:?}")));
        }
        let mut params = ParameterSet::new();
        params.add_affine("enc.l1", dims.d, dims.h, rng)?;
        params.add_affine("enc.l2", dims.h, dims.h, rng)?;
        params.add_affine("head", dims.h, dims.n_p, rng)?;
        Ok(JointModel { dims, params })
    }

    pub fn new_zeroed(dims: JointDims) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = Self::new(dims, &mut rng)?;
        for p in model.params.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        Ok(model)
    }

    pub fn from_params(dims: JointDims, params: ParameterSet) -> Result<Self> {
        let (d, h, n_p) = (dims.d, dims.h, dims.n_p);
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("enc.l1.w", vec![d, h]), ("enc.l1.b", vec![h]),
            ("enc.l2.w", vec![h, h]), ("enc.l2.b", vec![h]),
            ("head.w", vec![h, n_p]), ("head.b", vec![n_p]),
        ];
        verify_params(&params, &expected)?;
        Ok(JointModel { dims, params })
    }

    pub fn insert_into_tape(&self, tape: &mut Tape, bindings: &mut Bindings) -> JointVars {
        JointVars {
            vars: self.params.insert_into_tape(tape, bindings),
        }
    }

    /// Sigmoid class scores and the raw pre-sigmoid logits.
    pub fn forward(&self, tape: &mut Tape, vars: &JointVars, x: Var) -> Result<(Var, Var)> {
        let z = tape.affine(x, vars.var("enc.l1.w"), vars.var("enc.l1.b"))?;
        let z = tape.relu(z);
        let f = tape.affine(z, vars.var("enc.l2.w"), vars.var("enc.l2.b"))?;
        let raw = tape.affine(f, vars.var("head.w"), vars.var("head.b"))?;
        Ok((tape.sigmoid(raw), raw))
    }
}

/// Whichever architecture a run trains.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Joint(JointModel),
    Decoupled(PDLModel),
}

impl TrainedModel {
    pub fn params(&self) -> &ParameterSet {
        match self {
            TrainedModel::Joint(m) => &m.params,
            TrainedModel::Decoupled(m) => &m.params,
        }
    }
}

/// One training iteration's logged state. Loss components absent from the
/// active mode stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: u64,
    pub epoch: usize,
    /// Adversarial probe KL.
    pub l_pdl: Option<f64>,
    /// Multi-label BCE.
    pub l_t: Option<f64>,
    pub l_cm: Option<f64>,
    pub l_nt: Option<f64>,
    /// The weighted sum the updates actually descended.
    pub total: f64,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub iterations: Vec<IterationRow>,
    pub epoch_evals: Vec<EpochEval>,
    /// Parameter names touched by each update of one iteration, in update
    /// order; recorded once and asserted stable across iterations.
    pub touches: Vec<(String, Vec<String>)>,
}

/// Per-iteration rows as CSV.
pub fn runlog_csv(run: &str, mode: &str, log: &RunLog) -> String {
    let mut out = String::from("run,mode,iteration,epoch,l_pdl,l_t,l_cm,l_nt,total,alpha,gamma\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &log.iterations {
        let _ = writeln!(
            out,
            "{run},{mode},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.epoch,
            cell(r.l_pdl),
            cell(r.l_t),
            cell(r.l_cm),
            cell(r.l_nt),
            r.total,
            cell(r.alpha),
            cell(r.gamma),
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<SegmentRecord>,
    pub test: Vec<SegmentRecord>,
    pub vocab: PredicateVocabulary,
    pub d: usize,
}

/// Materialize the configured data source and cross-check label ranges and
/// feature widths.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    match &cfg.data {
        DataSource::Synthetic(syn) => {
            let data = generate(syn)?;
            Ok(LoadedData {
                train: data.train,
                test: data.test,
                vocab: data.vocab,
                d: syn.d,
            })
        }
        DataSource::Files { train, test, vocab } => {
            let vocab = PredicateVocabulary::load(vocab)?;
            let train = load_records(train, vocab.n_p())?;
            let test = load_records(test, vocab.n_p())?;
            let d = train[0].features.len();
            if test[0].features.len() != d {
                return Err(DllError::ShapeMismatch {
                    op: "load_data".into(),
                    detail: format!(
                        "train features have width {d}, test {}",
                        test[0].features.len()
                    ),
                });
            }
            Ok(LoadedData {
                train,
                test,
                vocab,
                d,
            })
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write checkpoints and CSV reports; nothing is written if
    /// unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint base path (without extension) to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub correlation: Option<CorrelationMatrix>,
    pub vocab: PredicateVocabulary,
    pub d: usize,
    pub log: RunLog,
    /// Final test-set report.
    pub report: MetricsReport,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream per (seed, tag): tag 0 initializes parameters, tag
/// `1 + e` orders epoch `e`'s batches.
pub(crate) fn derive_rng(seed: u64, tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(tag.wrapping_add(0x51_7C_C1_B7_27_22_0A_95)))
}

fn batch_tensors(
    records: &[SegmentRecord],
    idxs: &[usize],
    d: usize,
    n_p: usize,
) -> (Tensor, Tensor, Vec<Vec<usize>>) {
    let b = idxs.len();
    let mut x = Tensor::zeros(&[b, d]);
    let mut q = Tensor::zeros(&[b, n_p]);
    let mut labels = Vec::with_capacity(b);
    for (row, &i) in idxs.iter().enumerate() {
        let rec = &records[i];
        x.data_mut()[row * d..(row + 1) * d].copy_from_slice(&rec.features);
        for &l in &rec.labels {
            q.data_mut()[row * n_p + l] = 1.0;
        }
        labels.push(rec.labels.clone());
    }
    (x, q, labels)
}

fn ensure_finite(loss: f64, iteration: u64, breakdown: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(DllError::NonFiniteLoss {
            iteration,
            breakdown: breakdown.to_string(),
        })
    }
}

/// Step `params` from the freshly backpropagated `tape`, touching only the
/// prefixes in `groups` (all when empty), and return the touched names.
fn apply_update(
    params: &mut ParameterSet,
    tape: &Tape,
    bindings: &Bindings,
    lr: f64,
    mode: crate::params::OptimizerMode,
    groups: &[&str],
) -> Result<Vec<String>> {
    params.zero_grads();
    params.accumulate_grads(tape, bindings);
    params.step_groups(lr, mode, groups)
}

struct TouchAudit {
    reference: Vec<(String, Vec<String>)>,
}

impl TouchAudit {
    fn new() -> Self {
        TouchAudit {
            reference: Vec::new(),
        }
    }

    /// First iteration records the update sequence; later iterations must
    /// repeat it exactly.
    fn check(&mut self, iteration_touches: Vec<(String, Vec<String>)>) {
        if self.reference.is_empty() {
            self.reference = iteration_touches;
        } else {
            assert_eq!(
                self.reference, iteration_touches,
                "parameter update sequence drifted between iterations"
            );
        }
    }
}

/// Rebuild the trained model, and the correlation matrix when the mode
/// learns one, from a checkpoint's embedded metadata.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TrainedModel, Option<CorrelationMatrix>)> {
    let n_p = ck.vocab.n_p();
    let model = match ck.config.mode {
        Mode::Baseline | Mode::Kdl => TrainedModel::Joint(JointModel::from_params(
            JointDims {
                d: ck.d,
                h: ck.config.hidden,
                n_p,
            },
            ck.model.clone(),
        )?),
        Mode::Pdl | Mode::Dll => TrainedModel::Decoupled(PDLModel::from_params(
            ModelDims {
                d: ck.d,
                h: ck.config.hidden,
                n_a: ck.vocab.n_a(),
                n_s: ck.vocab.n_s(),
            },
            ck.model.clone(),
        )?),
    };
    let uses_cm = matches!(ck.config.mode, Mode::Kdl | Mode::Dll);
    let cm = match (uses_cm, &ck.correlation) {
        (true, Some(set)) => {
            let restored = CorrelationMatrix::from_params(set.clone())?;
            if restored.n_p() != n_p {
                return Err(DllError::Checkpoint(format!(
                    "correlation matrix is {0}x{0}, vocabulary has {n_p} classes",
                    restored.n_p()
                )));
            }
            Some(restored)
        }
        (false, None) => None,
        (true, None) => {
            return Err(DllError::Checkpoint(
                "checkpoint is missing the correlation matrix".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(DllError::Checkpoint(
                "checkpoint carries a correlation matrix this mode does not use".into(),
            ))
        }
    };
    Ok((model, cm))
}

/// Train under the configured mode and return the model, the correlation
/// matrix when the mode learns one, the run log, and the final test report.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let vocab = data.vocab.clone();
    let n_p = vocab.n_p();
    let headers = vocab.headers();
    let maps = MapMatrices::new(&vocab);
    let lambda = GradScale::new(cfg.pdl.lambda)?;
    let uses_cm = matches!(cfg.mode, Mode::Kdl | Mode::Dll);

    // Fresh state or checkpoint restore.
    let mut start_epoch = 0usize;
    let mut iteration = 0u64;
    let mut model: TrainedModel;
    let mut cm: Option<CorrelationMatrix>;
    match &opts.resume {
        None => {
            let mut init_rng = derive_rng(cfg.seed, 0);
            model = match cfg.mode {
                Mode::Baseline | Mode::Kdl => TrainedModel::Joint(JointModel::new(
                    JointDims {
                        d: data.d,
                        h: cfg.hidden,
                        n_p,
                    },
                    &mut init_rng,
                )?),
                Mode::Pdl | Mode::Dll => TrainedModel::Decoupled(PDLModel::new(
                    ModelDims {
                        d: data.d,
                        h: cfg.hidden,
                        n_a: vocab.n_a(),
                        n_s: vocab.n_s(),
                    },
                    &mut init_rng,
                )?),
            };
            cm = if uses_cm {
                Some(CorrelationMatrix::new(n_p)?)
            } else {
                None
            };
        }
        Some(base) => {
            let ck = Checkpoint::load(base)?;
            if ck.config != *cfg {
                return Err(DllError::Checkpoint(format!(
                    "checkpoint at '{}' was written under a different configuration",
                    base.display()
                )));
            }
            if ck.d != data.d {
                return Err(DllError::Checkpoint(format!(
                    "checkpoint expects feature width {}, data has {}",
                    ck.d, data.d
                )));
            }
            if ck.vocab.to_file_string() != vocab.to_file_string() {
                return Err(DllError::Checkpoint(
                    "checkpoint vocabulary does not match the data".into(),
                ));
            }
            let (restored_model, restored_cm) = model_from_checkpoint(&ck)?;
            model = restored_model;
            cm = restored_cm;
            start_epoch = ck.epochs_done;
            iteration = ck.iteration;
        }
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = RunLog::default();
    let mut audit = TouchAudit::new();
    let dec_cls: Vec<&str> = GROUP_DECOUPLERS
        .iter()
        .chain(GROUP_CLASSIFIERS)
        .copied()
        .collect();
    let dec_probes: Vec<&str> = GROUP_DECOUPLERS
        .iter()
        .chain(GROUP_PROBES)
        .copied()
        .collect();

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, 1 + epoch as u64));
        let gamma = gamma_at(&cfg.kdl, epoch);

        for batch in order.chunks(cfg.batch_size) {
            let (x, q, labels) = batch_tensors(&data.train, batch, data.d, n_p);
            let alpha = alpha_at(&cfg.kdl, epoch, iteration);
            let mut touches: Vec<(String, Vec<String>)> = Vec::new();
            let row = match (&mut model, cfg.mode) {
                (TrainedModel::Joint(joint), Mode::Baseline) => {
                    let mut tape = Tape::new();
                    let mut bind = Bindings::default();
                    let vars = joint.insert_into_tape(&mut tape, &mut bind);
                    let xv = tape.leaf(x);
                    let (p, _) = joint.forward(&mut tape, &vars, xv)?;
                    let l_t = target_loss(&mut tape, p, &q)?;
                    let l_t_val = tape.value(l_t).item();
                    ensure_finite(l_t_val, iteration, &format!("l_t={l_t_val}"))?;
                    tape.backward(l_t)?;
                    let touched =
                        apply_update(&mut joint.params, &tape, &bind, cfg.lr, cfg.optimizer, &[])?;
                    touches.push(("target".into(), touched));
                    IterationRow {
                        iteration,
                        epoch,
                        l_pdl: None,
                        l_t: Some(l_t_val),
                        l_cm: None,
                        l_nt: None,
                        total: l_t_val,
                        alpha: None,
                        gamma: None,
                    }
                }
                (TrainedModel::Joint(joint), Mode::Kdl) => {
                    let cm_ref = cm.as_mut().expect("kdl trains a correlation matrix");
                    let mut tape = Tape::new();
                    let mut bind_m = Bindings::default();
                    let mut bind_c = Bindings::default();
                    let vars = joint.insert_into_tape(&mut tape, &mut bind_m);
                    let m = cm_ref.insert_into_tape(&mut tape, &mut bind_c);
                    let xv = tape.leaf(x);
                    let (p, _) = joint.forward(&mut tape, &vars, xv)?;
                    let l_t = target_loss(&mut tape, p, &q)?;
                    let l_cm = correlation_update_loss(&mut tape, m, p, &labels)?;
                    let l_nt = knowledge_transfer_loss(&mut tape, m, p, &labels, &headers)?;
                    let total = combined_loss(&mut tape, l_t, l_cm, l_nt, alpha)?;
                    let (l_t_val, l_cm_val, l_nt_val, total_val) = (
                        tape.value(l_t).item(),
                        tape.value(l_cm).item(),
                        tape.value(l_nt).item(),
                        tape.value(total).item(),
                    );
                    ensure_finite(
                        total_val,
                        iteration,
                        &format!("l_t={l_t_val} l_cm={l_cm_val} l_nt={l_nt_val} alpha={alpha}"),
                    )?;
                    tape.backward(total)?;
                    let mut touched = apply_update(
                        &mut joint.params,
                        &tape,
                        &bind_m,
                        cfg.lr,
                        cfg.optimizer,
                        &[],
                    )?;
                    touched.extend(apply_update(
                        cm_ref.params_mut(),
                        &tape,
                        &bind_c,
                        cfg.lr,
                        cfg.optimizer,
                        &[],
                    )?);
                    touches.push(("joint".into(), touched));
                    IterationRow {
                        iteration,
                        epoch,
                        l_pdl: None,
                        l_t: Some(l_t_val),
                        l_cm: Some(l_cm_val),
                        l_nt: Some(l_nt_val),
                        total: total_val,
                        alpha: Some(alpha),
                        gamma: None,
                    }
                }
                (TrainedModel::Decoupled(pdl), mode @ (Mode::Pdl | Mode::Dll)) => {
                    // Target update: gamma-weighted BCE through calibration,
                    // stepping decouplers and classifiers.
                    let l_t_val;
                    {
                        let mut tape = Tape::new();
                        let mut bind = Bindings::default();
                        let vars = pdl.insert_into_tape(&mut tape, &mut bind);
                        let leaves = maps.insert(&mut tape);
                        let xv = tape.leaf(x.clone());
                        let (p, _) = predict(pdl, &mut tape, &vars, xv, &leaves, &cfg.pdl)?;
                        let l_t = target_loss(&mut tape, p, &q)?;
                        let weighted = tape.scale(l_t, gamma);
                        l_t_val = tape.value(l_t).item();
                        ensure_finite(l_t_val, iteration, &format!("l_t={l_t_val}"))?;
                        tape.backward(weighted)?;
                        let touched = apply_update(
                            &mut pdl.params,
                            &tape,
                            &bind,
                            cfg.lr,
                            cfg.optimizer,
                            &dec_cls,
                        )?;
                        touches.push(("target".into(), touched));
                    }
                    // Adversarial update: probes descend, decouplers ascend
                    // through the reversal layer.
                    let l_adv_val;
                    {
                        let mut tape = Tape::new();
                        let mut bind = Bindings::default();
                        let vars = pdl.insert_into_tape(&mut tape, &mut bind);
                        let xv = tape.leaf(x.clone());
                        let fwd = pdl.forward(&mut tape, &vars, xv)?;
                        let l_adv = pdl.adversarial_loss(&mut tape, &vars, &fwd, lambda)?;
                        l_adv_val = tape.value(l_adv).item();
                        ensure_finite(
                            l_adv_val,
                            iteration,
                            &format!("l_t={l_t_val} l_pdl={l_adv_val}"),
                        )?;
                        tape.backward(l_adv)?;
                        let touched = apply_update(
                            &mut pdl.params,
                            &tape,
                            &bind,
                            cfg.lr,
                            cfg.optimizer,
                            &dec_probes,
                        )?;
                        touches.push(("adversarial".into(), touched));
                    }
                    let (mut l_cm_val, mut l_nt_val) = (None, None);
                    if mode == Mode::Dll {
                        let cm_ref = cm.as_mut().expect("dll trains a correlation matrix");
                        // Correlation update: fit M to the current
                        // predictions; only M steps.
                        {
                            let mut tape = Tape::new();
                            let mut bind_m = Bindings::default();
                            let mut bind_c = Bindings::default();
                            let vars = pdl.insert_into_tape(&mut tape, &mut bind_m);
                            let m = cm_ref.insert_into_tape(&mut tape, &mut bind_c);
                            let leaves = maps.insert(&mut tape);
                            let xv = tape.leaf(x.clone());
                            let (p, _) = predict(pdl, &mut tape, &vars, xv, &leaves, &cfg.pdl)?;
                            let l_cm = correlation_update_loss(&mut tape, m, p, &labels)?;
                            let weighted = tape.scale(l_cm, gamma);
                            let v = tape.value(l_cm).item();
                            ensure_finite(
                                v,
                                iteration,
                                &format!("l_t={l_t_val} l_pdl={l_adv_val} l_cm={v}"),
                            )?;
                            tape.backward(weighted)?;
                            let touched = apply_update(
                                cm_ref.params_mut(),
                                &tape,
                                &bind_c,
                                cfg.lr,
                                cfg.optimizer,
                                &[],
                            )?;
                            touches.push(("correlation".into(), touched));
                            l_cm_val = Some(v);
                        }
                        // Transfer update: the freshly updated M pulls the
                        // model; decouplers and classifiers step.
                        {
                            let mut tape = Tape::new();
                            let mut bind_m = Bindings::default();
                            let mut bind_c = Bindings::default();
                            let vars = pdl.insert_into_tape(&mut tape, &mut bind_m);
                            let m = cm_ref.insert_into_tape(&mut tape, &mut bind_c);
                            let leaves = maps.insert(&mut tape);
                            let xv = tape.leaf(x.clone());
                            let (p, _) = predict(pdl, &mut tape, &vars, xv, &leaves, &cfg.pdl)?;
                            let l_nt = knowledge_transfer_loss(&mut tape, m, p, &labels, &headers)?;
                            let weighted = tape.scale(l_nt, gamma * alpha);
                            let v = tape.value(l_nt).item();
                            ensure_finite(
                                v,
                                iteration,
                                &format!(
                                    "l_t={l_t_val} l_pdl={l_adv_val} l_cm={} l_nt={v}",
                                    l_cm_val.unwrap_or(f64::NAN)
                                ),
                            )?;
                            tape.backward(weighted)?;
                            let touched = apply_update(
                                &mut pdl.params,
                                &tape,
                                &bind_m,
                                cfg.lr,
                                cfg.optimizer,
                                &dec_cls,
                            )?;
                            touches.push(("transfer".into(), touched));
                            l_nt_val = Some(v);
                        }
                    }
                    let total = gamma * l_t_val
                        + l_adv_val
                        + gamma * l_cm_val.unwrap_or(0.0)
                        + gamma * alpha * l_nt_val.unwrap_or(0.0);
                    IterationRow {
                        iteration,
                        epoch,
                        l_pdl: Some(l_adv_val),
                        l_t: Some(l_t_val),
                        l_cm: l_cm_val,
                        l_nt: l_nt_val,
                        total,
                        alpha: (mode == Mode::Dll).then_some(alpha),
                        gamma: Some(gamma),
                    }
                }
                (_, mode) => {
                    return Err(DllError::InvalidConfig(format!(
                        "model architecture does not match mode {mode}"
                    )))
                }
            };
            audit.check(touches.clone());
            if log.touches.is_empty() {
                log.touches = touches;
            }
            log.iterations.push(row);
            iteration += 1;
        }

        let (report, _) = evaluate(cfg, &model, &vocab, &data.test)?;
        log.epoch_evals.push(EpochEval {
            epoch,
            report,
        });

        if let Some(dir) = &opts.out_dir {
            let last = epoch + 1 == cfg.epochs;
            let due = cfg.checkpoint_every != 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if due || last {
                let ck = Checkpoint {
                    config: cfg.clone(),
                    epochs_done: epoch + 1,
                    iteration,
                    d: data.d,
                    vocab: vocab.clone(),
                    model: model.params().clone(),
                    correlation: cm.as_ref().map(|c| c.params().clone()),
                };
                ck.save(&dir.join(format!("ckpt_epoch{:03}", epoch + 1)))?;
            }
        }
    }

    let (report, _) = evaluate(cfg, &model, &vocab, &data.test)?;

    if let Some(dir) = &opts.out_dir {
        let mode = cfg.mode.to_string();
        let run = format!("seed{}", cfg.seed);
        let mut metrics = String::from(METRICS_CSV_HEADER);
        metrics.push('\n');
        for ev in &log.epoch_evals {
            append_metrics_rows(
                &mut metrics,
                &format!("{run}_epoch{:03}", ev.epoch + 1),
                &mode,
                &ev.report,
            );
        }
        append_metrics_rows(&mut metrics, &format!("{run}_final"), &mode, &report);
        std::fs::write(dir.join("metrics.csv"), metrics)?;

        let names: Vec<String> = vocab.predicates().iter().map(|p| p.name.clone()).collect();
        let freqs: Vec<u64> = vocab
            .predicates()
            .iter()
            .map(|p| p.train_frequency)
            .collect();
        let per_class = per_class_csv(&format!("{run}_final"), &mode, &report, &names, &freqs)?;
        std::fs::write(dir.join("per_class.csv"), per_class)?;
        std::fs::write(dir.join("runlog.csv"), runlog_csv(&run, &mode, &log))?;
    }

    Ok(TrainOutcome {
        model,
        correlation: cm,
        vocab,
        d: data.d,
        log,
        report,
    })
}

/// Score every record under the trained model. Pure: parameters are copied
/// onto a scratch tape per batch, in input order, sequentially.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    vocab: &PredicateVocabulary,
    records: &[SegmentRecord],
) -> Result<(MetricsReport, Vec<RankedPrediction>)> {
    if records.is_empty() {
        return Err(DllError::DegenerateMetricInput("no records to evaluate".into()));
    }
    let n_p = vocab.n_p();
    let d = records[0].features.len();
    let maps = MapMatrices::new(vocab);
    let mut preds = Vec::with_capacity(records.len());
    let all: Vec<usize> = (0..records.len()).collect();
    for batch in all.chunks(cfg.batch_size) {
        let (x, _, _) = batch_tensors(records, batch, d, n_p);
        let mut tape = Tape::new();
        let mut bind = Bindings::default();
        let p = match model {
            TrainedModel::Joint(joint) => {
                let vars = joint.insert_into_tape(&mut tape, &mut bind);
                let xv = tape.leaf(x);
                joint.forward(&mut tape, &vars, xv)?.0
            }
            TrainedModel::Decoupled(pdl) => {
                let vars = pdl.insert_into_tape(&mut tape, &mut bind);
                let leaves = maps.insert(&mut tape);
                let xv = tape.leaf(x);
                predict(pdl, &mut tape, &vars, xv, &leaves, &cfg.pdl)?.0
            }
        };
        let scores = tape.value(p);
        for (row, &i) in batch.iter().enumerate() {
            preds.push(RankedPrediction {
                id: records[i].id.clone(),
                scores: scores.row(row).to_vec(),
            });
        }
    }
    let truths: TruthMap = records
        .iter()
        .map(|r| (r.id.clone(), r.labels.iter().copied().collect()))
        .collect();
    let report = compute_report(&preds, &truths, &cfg.metric_ks)?;
    Ok((report, preds))
}

/// Mean multi-label BCE of the model over a record set.
pub fn dataset_bce(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    vocab: &PredicateVocabulary,
    records: &[SegmentRecord],
) -> Result<f64> {
    let (_, preds) = evaluate(cfg, model, vocab, records)?;
    let n_p = vocab.n_p();
    let mut sum = 0.0;
    for (rec, pred) in records.iter().zip(&preds) {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[1, n_p], pred.scores.clone())?);
        let mut q = Tensor::zeros(&[1, n_p]);
        for &l in &rec.labels {
            q.data_mut()[l] = 1.0;
        }
        let l = tape.bce_loss(p, &q)?;
        sum += tape.value(l).item();
    }
    Ok(sum / records.len() as f64)
}

/// One labeled run of a comparison sweep.
#[derive(Debug, Clone)]
pub struct CompareRun {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Train every run and tabulate final metrics side by side, with head/tail
/// mean-recall columns. All runs must share the data (vocabularies must
/// match) and the metric K list.
pub fn compare(runs: &[CompareRun]) -> Result<(String, Vec<TrainOutcome>)> {
    if runs.is_empty() {
        return Err(DllError::InvalidArgument {
            op: "compare".into(),
            detail: "no runs".into(),
        });
    }
    let ks = &runs[0].config.metric_ks;
    for r in runs {
        if &r.config.metric_ks != ks {
            return Err(DllError::InvalidConfig(format!(
                "run '{}' uses different metric ks",
                r.label
            )));
        }
    }
    let mut header = String::from("run,mode,seed");
    for &k in ks {
        let _ = write!(header, ",recall_at_{k}");
    }
    for &k in ks {
        let _ = write!(header, ",mean_recall_at_{k}");
    }
    for &k in ks {
        let _ = write!(header, ",precision_at_{k}");
    }
    header.push_str(",mean,macro_ap");
    for &k in ks {
        let _ = write!(header, ",head_mean_recall_at_{k}");
    }
    for &k in ks {
        let _ = write!(header, ",tail_mean_recall_at_{k}");
    }
    header.push('\n');

    let mut csv = header;
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut vocab_text: Option<String> = None;
    for run in runs {
        let outcome = train(&run.config, &TrainOptions::default())?;
        let text = outcome.vocab.to_file_string();
        match &vocab_text {
            None => vocab_text = Some(text),
            Some(first) if *first != text => {
                return Err(DllError::InvalidVocabulary(format!(
                    "run '{}' trained under a different vocabulary than the first run",
                    run.label
                )));
            }
            Some(_) => {}
        }
        let freqs: Vec<u64> = outcome
            .vocab
            .predicates()
            .iter()
            .map(|p| p.train_frequency)
            .collect();
        let (head, tail) = head_tail_partition(&freqs, run.config.head_quantile)?;
        let head_mr = subset_mean_recall(&outcome.report, &head)?;
        let tail_mr = subset_mean_recall(&outcome.report, &tail)?;
        let r = &outcome.report;
        let _ = write!(csv, "{},{},{}", run.label, run.config.mode, run.config.seed);
        for v in r.recall.iter().chain(&r.mean_recall).chain(&r.precision) {
            let _ = write!(csv, ",{v}");
        }
        let _ = write!(csv, ",{},{}", r.mean, r.macro_ap);
        for v in head_mr.iter().chain(&tail_mr) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
        outcomes.push(outcome);
    }
    Ok((csv, outcomes))
}
