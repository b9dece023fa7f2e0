//! The streaming adaptation loop.
//!
//! Each batch is scored by the EMA teacher before anything learns from it. The
//! student adapters then take one AdamW step on the balanced objective (with the
//! teacher's prediction as a fixed distillation target) and the teacher moves
//! toward the student.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::archive::{self, TensorArchive};
use crate::corrupt::ImageBatch;
use crate::dataset::{Dataset, LabeledBatch};
use crate::encoder::{init_lora, Encoder, EncoderConfig, GradMode, LoraConfig, LoraParams, StemWeights, TeacherState};
use crate::error::{Error, Result};
use crate::objectives::{
    composite_loss_and_grad, entropy_loss, mutual_information, uniformity_metric, BalanceConfig, LossBreakdown,
};
use crate::optim::{optimizer_step, AdamWConfig, AdamWState};
use crate::par::Exec;
use crate::sphere::{batch_accuracy, normalize_rows, normalize_rows_backward, zero_shot_probs, PredictionBatch, PrototypeBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TTAConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub balance: BalanceConfig,
    /// EMA momentum `m` in `teacher <- m * student + (1 - m) * teacher`.
    pub momentum: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            balance: BalanceConfig::default(),
            momentum: 1e-3,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TTAConfig {
    /// `lr = 0` is accepted and turns the loop into an evaluation pass.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("EMA momentum {} not in (0,1)", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} < 2", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW betas must be in [0,1) and eps > 0".into()));
        }
        self.balance.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Mutable state of one adaptation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TTAState {
    pub student: LoraParams,
    pub teacher: TeacherState,
    pub optimizer: AdamWState<f32>,
    pub step: u64,
}

impl TTAState {
    /// Fresh adapters; the teacher starts as an exact copy of the student.
    pub fn new(lora: &LoraConfig, enc: &EncoderConfig, momentum: f64) -> Result<Self> {
        let student: LoraParams = init_lora(lora, enc)?;
        Ok(Self {
            teacher: TeacherState::new(student.clone(), momentum)?,
            optimizer: AdamWState::new(&student),
            student,
            step: 0,
        })
    }
}

/// One row of the per-batch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_ent: f64,
    pub loss_unif: f64,
    pub loss_pl: f64,
    pub mi: f64,
    pub w: f64,
    pub acc_teacher: Option<f64>,
    pub acc_student: Option<f64>,
    pub uniformity_metric: f64,
    pub marginal_entropy: f64,
}

/// One adaptation step on `batch`. Returns the log row and the teacher's
/// pre-update predictions.
pub fn tta_step(
    state: &mut TTAState,
    stem: &StemWeights,
    batch: &ImageBatch,
    truth: Option<&[usize]>,
    bank: &PrototypeBank,
    cfg: &TTAConfig,
) -> Result<(MetricsRecord, PredictionBatch)> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            size: batch.len(),
            min: 2,
        });
    }
    if let Some(t) = truth {
        if t.len() != batch.len() {
            return Err(Error::LengthMismatch {
                left: batch.len(),
                right: t.len(),
            });
        }
    }
    let exec = cfg.exec;
    let student = Encoder::new(stem, Some(&state.student))?;
    let (raw, caches) = student.forward_batch_cached(batch.pixels.view(), exec)?;
    let z = normalize_rows(raw.view()).map_err(|e| numeric(state.step, e))?;
    let p = zero_shot_probs(&z, bank)?;

    let teacher = Encoder::new(stem, Some(&state.teacher.ema))?;
    let zt = teacher.embed(batch.pixels.view(), exec).map_err(|e| numeric(state.step, e))?;
    let q = zero_shot_probs(&zt, bank)?;

    let (losses, grad) = composite_loss_and_grad(&z, &p, &q, bank, &cfg.balance)?;
    check_finite(state.step, &losses, grad.total.iter().copied())?;

    let d_raw = normalize_rows_backward(raw.view(), grad.total.view());
    let grads = student.backward_batch(&caches, d_raw.view(), GradMode::Qkv, exec);
    let lora_grads = state.student.grads_from_qkv(&grads.qkv);
    optimizer_step(&mut state.student, &lora_grads, &mut state.optimizer, &cfg.optimizer())?;
    state.teacher.update(&state.student)?;

    let record = MetricsRecord {
        step: state.step,
        loss_ent: losses.ent,
        loss_unif: losses.unif,
        loss_pl: losses.pl,
        mi: losses.mi,
        w: losses.w,
        acc_teacher: truth.map(|t| batch_accuracy(&q, t)).transpose()?,
        acc_student: truth.map(|t| batch_accuracy(&p, t)).transpose()?,
        uniformity_metric: uniformity_metric(&z)? as f64,
        marginal_entropy: losses.marginal_entropy,
    };
    state.step += 1;
    Ok((record, q))
}

fn numeric(step: u64, e: Error) -> Error {
    match e {
        Error::ZeroVectorRow { row } => {
            Error::NumericFailure(format!("step {step}: embedding row {row} vanished"))
        }
        other => other,
    }
}

fn check_finite(step: u64, l: &LossBreakdown, grad: impl Iterator<Item = f32>) -> Result<()> {
    let values = [l.ent, l.unif, l.pl, l.mi, l.w, l.total];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure(format!("step {step}: non-finite loss {l:?}")));
    }
    let mut grad = grad;
    if grad.any(|g| !g.is_finite()) {
        return Err(Error::NumericFailure(format!("step {step}: non-finite gradient")));
    }
    Ok(())
}

/// Outcome of [`run_stream`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub records: Vec<MetricsRecord>,
    /// Batch-size-weighted mean of per-batch teacher accuracy.
    pub online_accuracy: Option<f64>,
    pub skipped_batches: usize,
}

/// Adapts over `stream` in order, calling `sink` with each log row as it is
/// produced. Batches with fewer than 2 images are skipped with a warning.
pub fn run_stream<'a, I, F>(
    state: &mut TTAState,
    stem: &StemWeights,
    stream: I,
    bank: &PrototypeBank,
    cfg: &TTAConfig,
    mut sink: F,
) -> Result<StreamResult>
where
    I: IntoIterator<Item = &'a LabeledBatch>,
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut records = Vec::new();
    let mut skipped = 0;
    let (mut hits, mut seen) = (0.0, 0usize);
    let mut labeled = true;
    let mut yielded = false;
    for batch in stream {
        yielded = true;
        let n = batch.images.len();
        if n < 2 {
            warn!("skipping batch of size {n} at step {}: uniformity needs pairs", state.step);
            skipped += 1;
            continue;
        }
        let (rec, _) = tta_step(state, stem, &batch.images, batch.labels.as_deref(), bank, cfg)?;
        match rec.acc_teacher {
            Some(a) => {
                hits += a * n as f64;
                seen += n;
            }
            None => labeled = false,
        }
        sink(&rec)?;
        records.push(rec);
    }
    if !yielded || records.is_empty() {
        return Err(Error::EmptyStream);
    }
    Ok(StreamResult {
        records,
        online_accuracy: (labeled && seen > 0).then(|| hits / seen as f64),
        skipped_batches: skipped,
    })
}

/// Summary of a frozen-model pass over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    /// Per-sample prediction entropy, averaged over the dataset.
    pub mean_entropy: f64,
    /// Batch-size-weighted means of per-batch values.
    pub uniformity_metric: f64,
    pub mutual_information: f64,
}

/// Evaluates the stem with optional adapters, batch by batch, without updating
/// anything. Used for the no-adapt baseline and for post-hoc scoring of a final
/// teacher.
pub fn evaluate(
    stem: &StemWeights,
    lora: Option<&LoraParams>,
    data: &Dataset,
    bank: &PrototypeBank,
    batch_size: usize,
    exec: Exec,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyStream);
    }
    let enc = Encoder::new(stem, lora)?;
    let (mut hits, mut ent, mut unif, mut mi, mut unif_n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for b in data.batches(batch_size) {
        let n = b.images.len();
        let z = enc.embed(b.images.pixels.view(), exec)?;
        let p = zero_shot_probs(&z, bank)?;
        if let Some(t) = &b.labels {
            hits += batch_accuracy(&p, t)? * n as f64;
        }
        ent += entropy_loss(&p) as f64 * n as f64;
        if n >= 2 {
            unif += uniformity_metric(&z)? as f64 * n as f64;
            mi += mutual_information(&p) as f64 * n as f64;
            unif_n += n;
        }
    }
    let total = data.len() as f64;
    let unif_n = unif_n.max(1) as f64;
    Ok(EvalReport {
        accuracy: data.labels.as_ref().map(|_| hits / total),
        mean_entropy: ent / total,
        uniformity_metric: unif / unif_n,
        mutual_information: mi / unif_n,
    })
}

const CHECKPOINT_FILE: &str = "lora.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    lora: LoraConfig,
    momentum: f64,
    step: u64,
}

/// Writes student and teacher adapters (`student.*`, `teacher.*`) to an archive.
pub fn save_checkpoint(dir: &Path, state: &TTAState, lora: &LoraConfig) -> Result<()> {
    let prefixed = |prefix: &str, p: &LoraParams| {
        p.tensors()
            .into_iter()
            .map(|(n, v)| (format!("{prefix}.{n}"), v.to_owned()))
            .collect::<Vec<_>>()
    };
    let mut a = TensorArchive::new();
    for (n, v) in prefixed("student", &state.student)
        .into_iter()
        .chain(prefixed("teacher", &state.teacher.ema))
    {
        a.insert(n, v);
    }
    a.write(dir)?;
    archive::write_json(
        &dir.join(CHECKPOINT_FILE),
        &CheckpointMeta {
            lora: lora.clone(),
            momentum: state.teacher.momentum,
            step: state.step,
        },
    )
}

/// Reads a checkpoint back as `(student, teacher)` adapters.
pub fn load_checkpoint(dir: &Path, enc: &EncoderConfig) -> Result<(LoraParams, LoraParams)> {
    let meta: CheckpointMeta = archive::read_json(&dir.join(CHECKPOINT_FILE))?;
    let a = TensorArchive::read(dir)?;
    let mut student: LoraParams = init_lora(&meta.lora, enc)?;
    let mut teacher = student.clone();
    for (prefix, p) in [("student", &mut student), ("teacher", &mut teacher)] {
        let views = p
            .tensors_mut()
            .into_iter()
            .map(|(n, v)| (format!("{prefix}.{n}"), v))
            .collect();
        a.fill_views(views)?;
    }
    Ok((student, teacher))
}
