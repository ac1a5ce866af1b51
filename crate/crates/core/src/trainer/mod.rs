//! Staged training runs, checkpoints and metric logs.

mod checkpoint;
mod data;
mod plan;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Manifest, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{build_vocab, TokenDocument, TrainData};
pub use plan::{Stage, Strategy, Task, TrainPlan, DEFAULT_LR};

use crate::corpus::MaskedPairBatch;
use crate::encoder::{check_params, init_params, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{optimizer_step, OptimizerState, ParamSet, Tape, Var};
use crate::objectives::{bitext_step, cmlm_loss, combined_loss, nli_step, BitextBatch, NliBatch};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Values observed at one update (or averaged over a logging interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Global step after the update.
    pub step: u64,
    pub stage: usize,
    pub task: Task,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cmlm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub masked_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bitext_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retrieval_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nli_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nli_accuracy: Option<f64>,
}

fn mean_of(items: &[StepMetrics], f: impl Fn(&StepMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = items.iter().filter_map(&f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Interval average; step, stage and task come from the last entry.
pub fn average_metrics(items: &[StepMetrics]) -> Option<StepMetrics> {
    let last = items.last()?;
    Some(StepMetrics {
        step: last.step,
        stage: last.stage,
        task: last.task,
        lr: last.lr,
        loss: mean_of(items, |m| Some(m.loss)).unwrap_or(0.0),
        cmlm_loss: mean_of(items, |m| m.cmlm_loss),
        masked_accuracy: mean_of(items, |m| m.masked_accuracy),
        bitext_loss: mean_of(items, |m| m.bitext_loss),
        retrieval_accuracy: mean_of(items, |m| m.retrieval_accuracy),
        nli_loss: mean_of(items, |m| m.nli_loss),
        nli_accuracy: mean_of(items, |m| m.nli_accuracy),
    })
}

/// Where a run starts from.
#[derive(Debug, Clone)]
pub enum Init {
    /// Freshly initialized weights.
    Fresh,
    /// Continue an interrupted run of the same plan: weights, moments, step
    /// counters and the random stream all come from the checkpoint.
    Resume(Box<Checkpoint>),
    /// Start the plan from existing weights with fresh optimizer state.
    WarmStart(ParamSet<f32>),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `checkpoint.ckpt` and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Stop (and checkpoint) once this many global steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    /// One entry per update, in order.
    pub history: Vec<StepMetrics>,
}

impl RunOutput {
    pub fn params(&self) -> &ParamSet<f32> {
        &self.checkpoint.params
    }
}

struct MetricsLog {
    file: Option<std::fs::File>,
    path: PathBuf,
    pending: Vec<StepMetrics>,
    every: u64,
}

impl MetricsLog {
    fn open(dir: Option<&Path>, append: bool, every: u64) -> Result<Self> {
        let path = dir.map(|d| d.join(METRICS_FILE)).unwrap_or_default();
        let file = match dir {
            None => None,
            Some(_) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            ),
        };
        Ok(Self {
            file,
            path,
            pending: Vec::new(),
            every,
        })
    }

    fn push(&mut self, m: &StepMetrics) -> Result<()> {
        self.pending.push(m.clone());
        if m.step.is_multiple_of(self.every) {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let avg = average_metrics(&self.pending);
        if let Some(m) = &avg {
            log::info!("step {} ({:?}): loss {:.4}", m.step, m.task, m.loss);
        }
        if let (Some(f), Some(avg)) = (self.file.as_mut(), avg) {
            let mut line = serde_json::to_vec(&avg)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        }
        self.pending.clear();
        Ok(())
    }
}

struct RunState {
    params: ParamSet<f32>,
    optimizer: OptimizerState<f32>,
    rng: ChaCha8Rng,
    global_step: u64,
    stage: usize,
}

impl RunState {
    fn checkpoint(
        &self,
        plan: &TrainPlan,
        encoder: &EncoderConfig,
        data: &TrainData,
        pending: &[StepMetrics],
    ) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                encoder: encoder.clone(),
                vocab: data.vocab.tokens().to_vec(),
                plan: plan.clone(),
                global_step: self.global_step,
                stage: self.stage,
                optimizer: self.optimizer.config.clone(),
                stage_step: self.optimizer.step,
                rng: RngState::capture(&self.rng),
                pending_metrics: pending.to_vec(),
            },
            params: self.params.clone(),
            first_moment: self.optimizer.first_moment.clone(),
            second_moment: self.optimizer.second_moment.clone(),
        }
    }
}

/// Runs the stages of `plan` in order, one optimizer update per step.
///
/// Each stage restarts the optimizer (moments, step counter and the
/// warmup/decay schedule). Everything random (pair sampling, swaps,
/// masking, dropout) comes from one ChaCha stream seeded by `plan.seed`,
/// so a run is reproducible and a resumed run continues it exactly.
pub fn run_plan(
    plan: &TrainPlan,
    encoder: &EncoderConfig,
    data: &TrainData,
    init: Init,
    options: &RunOptions,
) -> Result<RunOutput> {
    plan.validate()?;
    encoder.validate()?;
    let stages = plan.stages();
    let resuming = matches!(init, Init::Resume(_));
    let mut pending = Vec::new();
    let mut state = match init {
        Init::Fresh | Init::WarmStart(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            let params = match init {
                Init::WarmStart(p) => {
                    check_params(encoder, &p)?;
                    p
                }
                _ => init_params(encoder, &mut rng)?,
            };
            let optimizer = OptimizerState::new(plan.optimizer_for(stages[0].steps), &params);
            RunState {
                params,
                optimizer,
                rng,
                global_step: 0,
                stage: 0,
            }
        }
        Init::Resume(ckpt) => {
            ckpt.expect_config(encoder)?;
            if &ckpt.manifest.plan != plan {
                return Err(Error::ConfigMismatch(
                    "checkpoint was written by a different plan".into(),
                ));
            }
            if ckpt.manifest.vocab != data.vocab.tokens() {
                return Err(Error::ConfigMismatch(
                    "checkpoint vocabulary differs from the data's".into(),
                ));
            }
            pending = ckpt.manifest.pending_metrics.clone();
            RunState {
                optimizer: ckpt.optimizer_state(),
                rng: ckpt.manifest.rng.restore()?,
                global_step: ckpt.manifest.global_step,
                stage: ckpt.manifest.stage,
                params: ckpt.params,
            }
        }
    };
    if data.vocab.len() > encoder.vocab_size {
        return Err(Error::ConfigMismatch(format!(
            "vocabulary of {} exceeds encoder vocab_size {}",
            data.vocab.len(),
            encoder.vocab_size
        )));
    }

    let out_dir = options.out_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut last_good: Option<PathBuf> = None;
    let mut log = MetricsLog::open(out_dir, resuming, plan.log_every)?;
    log.pending = pending;
    let mut history = Vec::new();
    let save = |state: &RunState, log: &MetricsLog, last_good: &mut Option<PathBuf>| -> Result<()> {
        if let Some(path) = &ckpt_path {
            save_checkpoint(&state.checkpoint(plan, encoder, data, &log.pending), path)?;
            *last_good = Some(path.clone());
        }
        Ok(())
    };

    let mut interrupted = false;
    'stages: while state.stage < stages.len() {
        let stage = stages[state.stage];
        if state.optimizer.step == 0 {
            state.optimizer.reset(plan.optimizer_for(stage.steps));
        }
        while state.optimizer.step < stage.steps {
            if options.stop_after.is_some_and(|s| state.global_step >= s) {
                interrupted = true;
                break 'stages;
            }
            let metrics = match train_step(plan, encoder, data, &mut state, stage.task) {
                Ok(m) => m,
                Err(e @ (Error::NonFinite { .. } | Error::Degenerate(_))) => {
                    log.flush()?;
                    return Err(Error::TrainingAborted {
                        step: state.global_step,
                        reason: e.to_string(),
                        last_good,
                    });
                }
                Err(e) => return Err(e),
            };
            log.push(&metrics)?;
            history.push(metrics);
            if plan.checkpoint_every > 0 && state.global_step % plan.checkpoint_every == 0 {
                save(&state, &log, &mut last_good)?;
            }
        }
        state.stage += 1;
        state.optimizer.step = 0;
    }
    // An interrupted run keeps its partial logging interval in the
    // checkpoint instead of writing it out early.
    if !interrupted {
        log.flush()?;
    }
    save(&state, &log, &mut last_good)?;
    Ok(RunOutput {
        checkpoint: state.checkpoint(plan, encoder, data, &log.pending),
        history,
    })
}

struct Batches {
    mono: Option<MaskedPairBatch>,
    bitext: Option<BitextBatch>,
    nli: Option<NliBatch>,
}

fn sample_batches(
    plan: &TrainPlan,
    encoder: &EncoderConfig,
    data: &TrainData,
    task: Task,
    rng: &mut ChaCha8Rng,
) -> Result<Batches> {
    let b = plan.batch_size;
    let mono = match task {
        Task::Cmlm | Task::Joint => Some(data.mono_batch(encoder, b, plan.mask_count(encoder.max_len), rng)?),
        _ => None,
    };
    let bitext = match task {
        Task::Bitext | Task::Joint => Some(data.bitext_batch(encoder, b, rng)?),
        _ => None,
    };
    let nli = match task {
        Task::Nli => Some(data.nli_batch(encoder, b, rng)?),
        _ => None,
    };
    Ok(Batches { mono, bitext, nli })
}

/// Builds the task loss for `batches` and fills the loss and accuracy
/// fields of `m`.
fn task_loss<'t>(
    plan: &TrainPlan,
    enc: &mut Encoder<'_, 't, f32>,
    batches: &Batches,
    m: &mut StepMetrics,
) -> Result<Var<'t, f32>> {
    let cmlm = batches
        .mono
        .as_ref()
        .map(|batch| cmlm_loss(enc, batch, plan.variant))
        .transpose()?;
    let br = batches
        .bitext
        .as_ref()
        .map(|batch| bitext_step(enc, batch, plan.margin))
        .transpose()?;
    let nli = batches.nli.as_ref().map(|batch| nli_step(enc, batch)).transpose()?;
    if let Some(c) = &cmlm {
        m.cmlm_loss = Some(c.loss.item() as f64);
        m.masked_accuracy = Some(c.accuracy);
    }
    if let Some(r) = &br {
        m.bitext_loss = Some(r.loss.item() as f64);
        m.retrieval_accuracy = Some(r.accuracy);
    }
    if let Some(n) = &nli {
        m.nli_loss = Some(n.loss.item() as f64);
        m.nli_accuracy = Some(n.accuracy);
    }
    let loss = match (cmlm, br, nli) {
        (Some(c), Some(r), _) => combined_loss(c.loss, r.loss, plan.alpha)?,
        (Some(c), None, _) => c.loss,
        (None, Some(r), _) => r.loss,
        (None, None, Some(n)) => n.loss,
        (None, None, None) => unreachable!("every task produces a loss"),
    };
    m.loss = loss.item() as f64;
    Ok(loss)
}

fn empty_metrics(step: u64, stage: usize, task: Task, lr: f64) -> StepMetrics {
    StepMetrics {
        step,
        stage,
        task,
        lr,
        loss: 0.0,
        cmlm_loss: None,
        masked_accuracy: None,
        bitext_loss: None,
        retrieval_accuracy: None,
        nli_loss: None,
        nli_accuracy: None,
    }
}

fn train_step(
    plan: &TrainPlan,
    encoder: &EncoderConfig,
    data: &TrainData,
    state: &mut RunState,
    task: Task,
) -> Result<StepMetrics> {
    let batches = sample_batches(plan, encoder, data, task, &mut state.rng)?;
    let lr = state.optimizer.config.lr_at(state.optimizer.step);
    let tape = Tape::new();
    let bound = state.params.bind(&tape);
    let mut enc = Encoder::training(encoder, &bound, &mut state.rng);
    let mut m = empty_metrics(state.global_step + 1, state.stage, task, lr);
    let loss = task_loss(plan, &mut enc, &batches, &mut m)?;
    let mut grads = tape.backward(loss)?;
    let grads = bound.collect(&mut grads);
    optimizer_step(&mut state.params, &grads, &mut state.optimizer)?;
    state.global_step += 1;
    Ok(m)
}

/// Scores frozen `params` on `batches` batches of `task`, sampled (pairs,
/// swaps and masks) from a stream seeded by `seed`, without dropout. The
/// same seed always yields the same batches, so runs can be compared on
/// identical inputs. Returns the mean over batches.
pub fn evaluate(
    plan: &TrainPlan,
    encoder: &EncoderConfig,
    params: &ParamSet<f32>,
    data: &TrainData,
    task: Task,
    batches: usize,
    seed: u64,
) -> Result<StepMetrics> {
    check_params(encoder, params)?;
    if batches == 0 {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let sampled = sample_batches(plan, encoder, data, task, &mut rng)?;
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let mut enc = Encoder::new(encoder, &bound);
        let mut m = empty_metrics(0, 0, task, 0.0);
        task_loss(plan, &mut enc, &sampled, &mut m)?;
        out.push(m);
    }
    Ok(average_metrics(&out).expect("at least one batch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_skip_missing_values() {
        let mk = |step, acc: Option<f64>| StepMetrics {
            step,
            stage: 0,
            task: Task::Cmlm,
            lr: 0.1,
            loss: step as f64,
            cmlm_loss: None,
            masked_accuracy: acc,
            bitext_loss: None,
            retrieval_accuracy: None,
            nli_loss: None,
            nli_accuracy: None,
        };
        let avg = average_metrics(&[mk(1, Some(0.2)), mk(2, None), mk(3, Some(0.4))]).unwrap();
        assert_eq!(avg.step, 3);
        assert_eq!(avg.loss, 2.0);
        assert!((avg.masked_accuracy.unwrap() - 0.3).abs() < 1e-15);
        assert!(average_metrics(&[]).is_none());
    }
}
