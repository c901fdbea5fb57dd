//! Semi-supervised mean-teacher training: per-step objective assembly,
//! Adam + EMA updates, validation and best-checkpoint selection.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{supervised_loss, total_loss, LossReport, W_PS_FINAL, W_UA_FINAL};
use crate::losses::{ramp_up, RampSchedule};
use crate::metrics::{hd95, iou};
use crate::net::{adam_step, backward, ema_update, forward, he_init, AdamConfig, Mode, NetConfig, NetParams, OptimizerState};
use crate::neighbors::{ensemble_backward, ensemble_similarity, loss_entropy_min, loss_nn, pseudo_label_nn, KernelChoice, Kernel, Reducer, SimilarityEnsemble};
use crate::phantom::{DatasetSplit, LabeledCase};
use crate::real::Real;
use crate::rng;
use crate::uncertainty::{loss_ua, mc_uncertainty, reliability_masks, uncertainty_threshold, McUncertainty};
use crate::volume::{add_gaussian_noise, softmax_over_classes, FeatureMap, Mask3D, Volume3D};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_STEP: u64 = 3;

/// Voxels over which the entropy-minimization loss is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnScope {
    #[default]
    All,
    Unreliable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Labeled and unlabeled images per step (each).
    pub batch_size: usize,
    /// Monte Carlo dropout passes.
    pub mc_passes: usize,
    /// Embeddings sampled per polarity.
    pub k: usize,
    /// Ensemble size.
    pub l: usize,
    pub ema_decay: f64,
    pub teacher_noise: f32,
    pub student_noise: f32,
    pub dropout: f64,
    pub levels: usize,
    pub base_filters: usize,
    pub learning_rate: f64,
    pub kernel: Kernel,
    pub reducer: Reducer,
    pub band: f64,
    pub use_nn: bool,
    pub use_en: bool,
    pub en_scope: EnScope,
    /// Overrides the derived `ceil(max(|labeled|, |unlabeled|) / batch_size)`.
    pub iterations_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 2,
            mc_passes: 5,
            k: 16,
            l: 5,
            ema_decay: 0.99,
            teacher_noise: 0.01,
            student_noise: 0.02,
            dropout: 0.15,
            levels: 3,
            base_filters: 8,
            learning_rate: 1e-4,
            kernel: Kernel::Cosine,
            reducer: Reducer::Mean,
            band: 2.0,
            use_nn: true,
            use_en: true,
            en_scope: EnScope::All,
            iterations_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [("batch_size", self.batch_size), ("mc_passes", self.mc_passes), ("k", self.k), ("l", self.l)];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::invalid("iterations_per_epoch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        for (name, s) in [("teacher_noise", self.teacher_noise), ("student_noise", self.student_noise)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {s}")));
            }
        }
        if !(self.band >= 1.0) {
            return Err(Error::invalid(format!("band must be >= 1, got {}", self.band)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            levels: self.levels,
            base_filters: self.base_filters,
            dropout_rate: self.dropout,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn kernel_choice(&self) -> KernelChoice {
        KernelChoice {
            kernel: self.kernel,
            reducer: self.reducer,
        }
    }

    pub fn iterations_per_epoch_for(&self, labeled: usize, unlabeled: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| labeled.max(unlabeled).div_ceil(self.batch_size))
            .max(1)
    }
}

/// Multipliers of the four loss terms in the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub s: f64,
    pub ua: f64,
    pub nn: f64,
    pub en: f64,
}

impl TermWeights {
    /// `(1, w_UA, w_PS, w_PS)` at iteration `t` of `t_total`.
    pub fn ramped(t: f64, t_total: f64) -> Result<Self> {
        let ua = ramp_up(t, RampSchedule::new(W_UA_FINAL, t_total)?);
        let ps = ramp_up(t, RampSchedule::new(W_PS_FINAL, t_total)?);
        Ok(Self { s: 1.0, ua, nn: ps, en: ps })
    }
}

/// Value, parameter gradient and kink signatures of one objective evaluation.
pub struct Objective<T = f32> {
    pub report: LossReport,
    pub grads: NetParams<T>,
    /// Activation patterns of every student pass; equal signatures mean the
    /// network is smooth between two evaluations.
    pub signature: Vec<u8>,
    /// Neighbor pseudo-labels, the only other discontinuity (of `L_NN`).
    pub nn_labels: Vec<u8>,
}

/// Teacher-side quantities for one unlabeled volume.
pub struct TeacherTargets<T = f32> {
    pub mc: McUncertainty<T>,
    pub lambda: f64,
    pub reliable: Mask3D,
    pub unreliable: Mask3D,
}

pub fn teacher_targets<T: Real>(
    teacher: &NetParams<T>,
    x: &Volume3D,
    cfg: &TrainConfig,
    t: f64,
    t_total: f64,
    stream: &mut rng::Stream,
) -> Result<TeacherTargets<T>> {
    let mc = mc_uncertainty(teacher, x, cfg.mc_passes, cfg.teacher_noise, stream)?;
    let lambda = uncertainty_threshold(t, t_total)?;
    let (reliable, unreliable) = reliability_masks(&mc.entropy, lambda);
    Ok(TeacherTargets { mc, lambda, reliable, unreliable })
}

/// Teacher penultimate features of a labeled volume under weak noise.
pub fn teacher_features<T: Real>(teacher: &NetParams<T>, x: &Volume3D, sigma: f32, stream: &mut rng::Stream) -> Result<FeatureMap<T>> {
    let noisy = add_gaussian_noise(x, sigma, stream)?;
    Ok(forward(teacher, &noisy, Mode::Eval, stream)?.penultimate)
}

struct ImageTerms<T> {
    values: [f64; 4],
    reliable: usize,
    voxels: usize,
    grads: NetParams<T>,
    signature: Vec<u8>,
    nn_labels: Vec<u8>,
}

fn accumulate<T: Real>(params: &NetParams<T>, parts: Vec<ImageTerms<T>>) -> Result<(NetParams<T>, [f64; 4], usize, usize, [Vec<u8>; 2])> {
    let mut grads = NetParams::zeros(*params.config())?;
    let mut sums = [0.0; 4];
    let (mut reliable, mut voxels) = (0, 0);
    let mut signature = Vec::new();
    let mut nn_labels = Vec::new();
    for p in parts {
        grads.axpy(T::one(), &p.grads);
        for (s, v) in sums.iter_mut().zip(p.values) {
            *s += v;
        }
        reliable += p.reliable;
        voxels += p.voxels;
        signature.extend(p.signature);
        nn_labels.extend(p.nn_labels);
    }
    Ok((grads, sums, reliable, voxels, [signature, nn_labels]))
}

fn scaled<T: Real>(d: &FeatureMap<T>, a: f64) -> FeatureMap<T> {
    let mut out = d.clone();
    let a = T::lit(a);
    out.data_mut().iter_mut().for_each(|x| *x *= a);
    out
}

/// Teacher-side targets of one batch: uncertainty, pseudo-labels and the
/// teacher features of each unlabeled image's paired labeled image.
pub struct StepTargets<T = f32> {
    pub unlabeled: Vec<TeacherTargets<T>>,
    pub paired_features: Vec<Option<FeatureMap<T>>>,
}

/// Computes everything the teacher contributes to a step. Nothing here
/// depends on the student, so no gradient flows through these targets.
#[allow(clippy::too_many_arguments)]
pub fn prepare_targets<T: Real>(
    teacher: &NetParams<T>,
    labeled: &[&LabeledCase],
    unlabeled: &[&Volume3D],
    cfg: &TrainConfig,
    t: f64,
    t_total: f64,
    step_seed: u64,
) -> Result<StepTargets<T>> {
    if labeled.is_empty() {
        return Err(Error::invalid("a training step needs at least one labeled image"));
    }
    let per_image = unlabeled
        .par_iter()
        .enumerate()
        .map(|(u, x_u)| -> Result<(TeacherTargets<T>, Option<FeatureMap<T>>)> {
            let tt = teacher_targets(teacher, x_u, cfg, t, t_total, &mut rng::stream(step_seed, &[1, u as u64]))?;
            let f_l = if cfg.use_nn || cfg.use_en {
                let pair = labeled[u % labeled.len()];
                Some(teacher_features(teacher, &pair.volume, cfg.teacher_noise, &mut rng::stream(step_seed, &[3, u as u64]))?)
            } else {
                None
            };
            Ok((tt, f_l))
        })
        .collect::<Result<Vec<_>>>()?;
    let (unlabeled, paired_features) = per_image.into_iter().unzip();
    Ok(StepTargets { unlabeled, paired_features })
}

/// Evaluates the student objective on one batch against fixed teacher
/// targets. With `weights` set, also returns the exact gradient of
/// `sum_i weight_i * term_i` with respect to the student parameters; without,
/// the gradient is left at zero. Every random draw derives from `step_seed`,
/// so calls with perturbed student weights see identical noise, dropout masks
/// and embedding samples.
#[allow(clippy::too_many_arguments)]
pub fn student_objective<T: Real>(
    student: &NetParams<T>,
    labeled: &[&LabeledCase],
    unlabeled: &[&Volume3D],
    targets: &StepTargets<T>,
    cfg: &TrainConfig,
    t: f64,
    t_total: f64,
    step_seed: u64,
    weights: Option<TermWeights>,
) -> Result<Objective<T>> {
    if labeled.is_empty() {
        return Err(Error::invalid("a training step needs at least one labeled image"));
    }
    if targets.unlabeled.len() != unlabeled.len() {
        return Err(Error::shape("teacher targets do not match the unlabeled batch"));
    }
    let inv_l = 1.0 / labeled.len() as f64;
    let inv_u = if unlabeled.is_empty() { 0.0 } else { 1.0 / unlabeled.len() as f64 };
    let w = weights.unwrap_or(TermWeights { s: 0.0, ua: 0.0, nn: 0.0, en: 0.0 });
    let grads_of = |trace: &crate::net::ForwardTrace<T>, d: &FeatureMap<T>, dp: Option<&FeatureMap<T>>| {
        if weights.is_some() {
            backward(student, trace, d, dp)
        } else {
            NetParams::zeros(*student.config())
        }
    };

    let labeled_parts = labeled
        .par_iter()
        .enumerate()
        .map(|(j, case)| -> Result<ImageTerms<T>> {
            let mut s = rng::stream(step_seed, &[0, j as u64]);
            let x = add_gaussian_noise(&case.volume, cfg.student_noise, &mut s)?;
            let trace = forward(student, &x, Mode::Train, &mut s)?;
            let probs = softmax_over_classes(&trace.logits)?;
            let ls = supervised_loss(&probs, &case.mask)?;
            let grads = grads_of(&trace, &scaled(&ls.d_logits, w.s * inv_l), None)?;
            Ok(ImageTerms {
                values: [ls.value.as_f64() * inv_l, 0.0, 0.0, 0.0],
                reliable: 0,
                voxels: 0,
                grads,
                signature: trace.activation_signature(),
                nn_labels: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let unlabeled_parts = unlabeled
        .par_iter()
        .enumerate()
        .map(|(u, x_u)| -> Result<ImageTerms<T>> {
            let tt = &targets.unlabeled[u];
            let mut s = rng::stream(step_seed, &[2, u as u64]);
            let x = add_gaussian_noise(x_u, cfg.student_noise, &mut s)?;
            let trace = forward(student, &x, Mode::Train, &mut s)?;
            let probs = softmax_over_classes(&trace.logits)?;
            let ua = loss_ua(&tt.mc.pseudo, &probs, &tt.reliable)?;
            let mut d_logits = scaled(&ua.d_logits, w.ua * inv_u);
            let mut values = [0.0, ua.value.as_f64() * inv_u, 0.0, 0.0];
            let mut d_pen = None;
            let signature = trace.activation_signature();
            let mut nn_labels = Vec::new();
            if let Some(f_l) = targets.paired_features[u].as_ref().filter(|_| cfg.use_nn || cfg.use_en) {
                let pair = labeled[u % labeled.len()];
                let f_u = &trace.penultimate;
                let ens = ensemble_similarity(&pair.mask, f_l, f_u, cfg.k, cfg.l, cfg.band, cfg.kernel_choice(), &mut rng::stream(step_seed, &[4, u as u64]))?;
                let y_nn = pseudo_label_nn(&ens.k_plus, &ens.k_minus)?;
                nn_labels.extend_from_slice(y_nn.data());
                if cfg.use_nn {
                    let nn = loss_nn(&y_nn, &probs, &tt.unreliable)?;
                    values[2] = nn.value.as_f64() * inv_u;
                    let a = T::lit(w.nn * inv_u);
                    for (d, &g) in d_logits.data_mut().iter_mut().zip(nn.d_logits.data()) {
                        *d += g * a;
                    }
                }
                if cfg.use_en {
                    let scope = match cfg.en_scope {
                        EnScope::All => None,
                        EnScope::Unreliable => Some(&tt.unreliable),
                    };
                    let en = loss_entropy_min(&ens.k_plus, &ens.k_minus, scope)?;
                    values[3] = en.value.as_f64() * inv_u;
                    if weights.is_some() {
                        let a = T::lit(w.en * inv_u);
                        let dp: Vec<T> = en.d_plus.iter().map(|&g| g * a).collect();
                        let dm: Vec<T> = en.d_minus.iter().map(|&g| g * a).collect();
                        d_pen = Some(ensemble_backward(&ens, f_u, cfg.kernel_choice(), &dp, &dm)?);
                    }
                }
            }
            let grads = grads_of(&trace, &d_logits, d_pen.as_ref())?;
            Ok(ImageTerms {
                values,
                reliable: tt.reliable.count(),
                voxels: tt.reliable.len(),
                grads,
                signature,
                nn_labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut parts = labeled_parts;
    parts.extend(unlabeled_parts);
    let (grads, v, reliable, voxels, [signature, nn_labels]) = accumulate(student, parts)?;
    let mut report = total_loss(v[0], v[1], v[2], v[3], t, t_total)?;
    report.reliable_voxels = reliable;
    report.unreliable_voxels = voxels - reliable;
    report.reliable_fraction = if voxels == 0 { 0.0 } else { reliable as f64 / voxels as f64 };
    Ok(Objective { report, grads, signature, nn_labels })
}

/// Student, optimizer and teacher plus the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: NetParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub teacher: NetParams<f32>,
    pub iteration: u64,
    pub total_iterations: u64,
}

impl TrainState {
    /// He-initialized student with an identical teacher.
    pub fn init(cfg: &TrainConfig, total_iterations: u64) -> Result<Self> {
        cfg.validate()?;
        let student: NetParams<f32> = he_init(cfg.net_config(), &mut rng::stream(cfg.seed, &[TAG_INIT]))?;
        Ok(Self {
            optimizer: OptimizerState::new(&student, cfg.adam()),
            teacher: student.clone(),
            student,
            iteration: 0,
            total_iterations: total_iterations.max(1),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.student.clone(), self.teacher.clone(), self.optimizer.clone(), self.iteration, self.total_iterations)
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Self {
            student: c.student,
            optimizer: c.optimizer,
            teacher: c.teacher,
            iteration: c.iteration,
            total_iterations: c.total_iterations.max(1),
        }
    }
}

/// One optimization step: objective, Adam on the student, EMA on the teacher.
/// The state is left untouched when the loss or gradients are not finite.
pub fn train_step(state: &mut TrainState, labeled: &[&LabeledCase], unlabeled: &[&Volume3D], cfg: &TrainConfig) -> Result<LossReport> {
    let t = state.iteration as f64;
    let t_total = state.total_iterations as f64;
    let step_seed = rng::derive_seed(cfg.seed, &[TAG_STEP, state.iteration]);
    let weights = TermWeights::ramped(t, t_total)?;
    let targets = prepare_targets(&state.teacher, labeled, unlabeled, cfg, t, t_total, step_seed)?;
    let obj = student_objective(&state.student, labeled, unlabeled, &targets, cfg, t, t_total, step_seed, Some(weights))?;
    if !obj.report.l_total.is_finite() || !obj.grads.all_finite() {
        return Err(Error::Divergence(format!("non-finite loss or gradient at iteration {}: {:?}", state.iteration, obj.report)));
    }
    adam_step(&mut state.student, &obj.grads, &mut state.optimizer)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    state.iteration += 1;
    Ok(obj.report)
}

/// Penalty HD95 for an empty prediction: the volume diagonal in mm.
pub fn diagonal_mm(dims: [usize; 3], spacing: [f32; 3]) -> f64 {
    (0..3)
        .map(|a| ((dims[a] as f64 - 1.0) * spacing[a] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Segmentation of a clean volume by `params` (dropout off, no noise).
pub fn predict(params: &NetParams<f32>, x: &Volume3D) -> Result<Mask3D> {
    let trace = forward(params, x, Mode::Eval, &mut rng::stream(0, &[]))?;
    Ok(softmax_over_classes(&trace.logits)?.argmax())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub iou: f64,
    pub hd95_mm: f64,
}

/// IoU and HD95 per case; an empty prediction or reference scores the volume
/// diagonal as HD95.
pub fn case_metrics(params: &NetParams<f32>, cases: &[LabeledCase]) -> Result<Vec<CaseMetrics>> {
    cases
        .par_iter()
        .map(|c| {
            let pred = predict(params, &c.volume)?;
            let hd = match hd95(&pred, &c.mask, c.volume.spacing()) {
                Err(Error::EmptyMask(_)) => diagonal_mm(c.volume.dims(), c.volume.spacing()),
                other => other?,
            };
            Ok(CaseMetrics {
                case_id: c.id.clone(),
                iou: iou(&pred, &c.mask)?,
                hd95_mm: hd,
            })
        })
        .collect()
}

/// Mean IoU and mean HD95 of the teacher over `cases`.
pub fn validate(teacher: &NetParams<f32>, cases: &[LabeledCase]) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let m = case_metrics(teacher, cases)?;
    let n = m.len() as f64;
    Ok((m.iter().map(|c| c.iou).sum::<f64>() / n, m.iter().map(|c| c.hd95_mm).sum::<f64>() / n))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(LossReport),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iter: u64,
    pub val_iou: f64,
    pub val_hd95: f64,
    pub best: bool,
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val: Option<(f64, f64)>,
    pub last: Checkpoint,
    /// Set when a step diverged; `last` then holds the last healthy state.
    pub aborted: Option<String>,
}

fn permutation(n: usize, seed: u64, epoch: usize, pool: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[TAG_SHUFFLE, epoch as u64, pool]));
    idx
}

/// Trains for `cfg.epochs`, validating the teacher after every epoch and
/// keeping the checkpoint with the lowest validation HD95 (earlier epoch on
/// ties). Every log record is handed to `log` as it is produced.
pub fn fit(cfg: &TrainConfig, data: &DatasetSplit, log: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::invalid("training needs at least one labeled case"));
    }
    let per_epoch = cfg.iterations_per_epoch_for(data.labeled.len(), data.unlabeled.len());
    let total = (cfg.epochs * per_epoch) as u64;
    let mut state = TrainState::init(cfg, total)?;
    let mut best = state.checkpoint()?;
    let mut best_epoch = 0;
    let mut best_val: Option<(f64, f64)> = None;
    let b = cfg.batch_size;
    for epoch in 1..=cfg.epochs {
        let lp = permutation(data.labeled.len(), cfg.seed, epoch, 0);
        let up = permutation(data.unlabeled.len(), cfg.seed, epoch, 1);
        for i in 0..per_epoch {
            let labeled: Vec<&LabeledCase> = (0..b).map(|j| &data.labeled[lp[(i * b + j) % lp.len()]]).collect();
            let unlabeled: Vec<&Volume3D> = if up.is_empty() {
                Vec::new()
            } else {
                (0..b).map(|j| &data.unlabeled[up[(i * b + j) % up.len()]].volume).collect()
            };
            match train_step(&mut state, &labeled, &unlabeled, cfg) {
                Ok(report) => log(&LogRecord::Step(report))?,
                Err(Error::Divergence(msg)) => {
                    return Ok(FitOutcome {
                        best,
                        best_epoch,
                        best_val,
                        last: state.checkpoint()?,
                        aborted: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let (val_iou, val_hd95) = if data.validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validate(&state.teacher, &data.validation)?
        };
        let improved = !data.validation.is_empty() && best_val.is_none_or(|(_, h)| val_hd95 < h);
        if improved || (data.validation.is_empty() && epoch == cfg.epochs) {
            best = state.checkpoint()?;
            best_epoch = epoch;
            if improved {
                best_val = Some((val_iou, val_hd95));
            }
        }
        log(&LogRecord::Epoch(EpochRecord {
            epoch,
            iter: state.iteration,
            val_iou,
            val_hd95,
            best: improved,
        }))?;
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val,
        last: state.checkpoint()?,
        aborted: None,
    })
}

/// Every intermediate map of the pseudo-labeling pipeline for one unlabeled
/// volume, for inspection.
pub struct PseudoLabelDump {
    pub entropy: crate::volume::Field<f32>,
    pub lambda: f64,
    pub reliable: Mask3D,
    pub pseudo_teacher: Mask3D,
    pub similarity: SimilarityEnsemble<f32>,
    pub pseudo_nn: Mask3D,
}

/// Runs the teacher targets and neighbor maps with the checkpoint's schedule
/// position; student features come from a clean dropout-off pass.
pub fn inspect_pseudolabels(ckpt: &Checkpoint, labeled: &LabeledCase, x: &Volume3D, cfg: &TrainConfig) -> Result<PseudoLabelDump> {
    let seed = rng::derive_seed(cfg.seed, &[TAG_STEP, ckpt.iteration]);
    let tt = teacher_targets(&ckpt.teacher, x, cfg, ckpt.iteration as f64, ckpt.total_iterations.max(1) as f64, &mut rng::stream(seed, &[1, 0]))?;
    let f_u = forward(&ckpt.student, x, Mode::Eval, &mut rng::stream(seed, &[2, 0]))?.penultimate;
    let f_l = teacher_features(&ckpt.teacher, &labeled.volume, cfg.teacher_noise, &mut rng::stream(seed, &[3, 0]))?;
    let similarity = ensemble_similarity(&labeled.mask, &f_l, &f_u, cfg.k, cfg.l, cfg.band, cfg.kernel_choice(), &mut rng::stream(seed, &[4, 0]))?;
    let pseudo_nn = pseudo_label_nn(&similarity.k_plus, &similarity.k_minus)?;
    Ok(PseudoLabelDump {
        entropy: tt.mc.entropy,
        lambda: tt.lambda,
        reliable: tt.reliable,
        pseudo_teacher: tt.mc.pseudo,
        similarity,
        pseudo_nn,
    })
}

/// Rows of the loss ablation plus the supervised baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Ua,
    UaNn,
    UaNnEn,
    UaEn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Ua, Variant::UaNn, Variant::UaNnEn, Variant::UaEn];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ua => "UA",
            Variant::UaNn => "UA+NN",
            Variant::UaNnEn => "UA+NN+EN",
            Variant::UaEn => "UA+EN",
        }
    }

    /// Config and data for this row. The baseline drops the unlabeled pool
    /// but keeps the step budget of the semi-supervised rows.
    pub fn configure(self, cfg: &TrainConfig, data: &DatasetSplit) -> (TrainConfig, DatasetSplit) {
        let mut c = cfg.clone();
        let mut d = data.clone();
        let (nn, en) = match self {
            Variant::Baseline | Variant::Ua => (false, false),
            Variant::UaNn => (true, false),
            Variant::UaNnEn => (true, true),
            Variant::UaEn => (false, true),
        };
        c.use_nn = nn;
        c.use_en = en;
        if self == Variant::Baseline {
            c.iterations_per_epoch = Some(cfg.iterations_per_epoch_for(data.labeled.len(), data.unlabeled.len()));
            d.unlabeled.clear();
        }
        (c, d)
    }
}

/// Test-set outcome of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub mean_iou: f64,
    pub mean_hd95: f64,
    pub best_epoch: usize,
    pub cases: Vec<CaseMetrics>,
}

/// Trains `variant` and scores the selected teacher on the test split.
pub fn run_variant(cfg: &TrainConfig, data: &DatasetSplit, variant: Variant, log: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<RunSummary> {
    let (c, d) = variant.configure(cfg, data);
    let out = fit(&c, &d, log)?;
    if let Some(msg) = out.aborted {
        return Err(Error::Divergence(msg));
    }
    let cases = case_metrics(&out.best.teacher, &d.test)?;
    let n = cases.len().max(1) as f64;
    Ok(RunSummary {
        mean_iou: cases.iter().map(|c| c.iou).sum::<f64>() / n,
        mean_hd95: cases.iter().map(|c| c.hd95_mm).sum::<f64>() / n,
        best_epoch: out.best_epoch,
        cases,
    })
}
