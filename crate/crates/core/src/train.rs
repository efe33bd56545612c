//! Optimization, fine-tuning scopes, perplexity evaluation and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::BatchStream;
use crate::heads::{OutputHead, VqLossPath};
use crate::model::LanguageModel;
use crate::numerics::{Float, ParamStore, Tape};
use crate::rng::SeedStream;
use crate::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    #[default]
    FullModel,
    HeadAndFinalNorm,
    CodebookOnly,
    None,
}

impl FromStr for FinetuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full_model" => Self::FullModel,
            "head_and_final_norm" => Self::HeadAndFinalNorm,
            "codebook_only" => Self::CodebookOnly,
            "none" => Self::None,
            other => bail!(Config, "unknown fine-tuning scope {other:?}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Steps between validation passes and checkpoints; 0 disables both.
    pub eval_interval: usize,
    /// Validation batches per evaluation; 0 means the whole split.
    pub eval_batches: usize,
    pub finetune_scope: FinetuneScope,
    /// Write wall-clock throughput into the metrics log. Off makes the log
    /// a pure function of seed, config and corpus.
    pub log_throughput: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            lr_min: 3e-5,
            warmup_steps: 200,
            total_steps: 5_000,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            seq_len: 128,
            seed: 0,
            eval_interval: 1_000,
            eval_batches: 0,
            finetune_scope: FinetuneScope::FullModel,
            log_throughput: true,
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            bail!(Config, "warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps);
        }
        if !(self.clip_norm > 0.0) {
            bail!(Config, "clip_norm must be positive, got {}", self.clip_norm);
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            bail!(Config, "batch_size and seq_len must be positive");
        }
        if !(self.lr_peak >= self.lr_min && self.lr_min >= 0.0) {
            bail!(Config, "need lr_peak ≥ lr_min ≥ 0, got {} and {}", self.lr_peak, self.lr_min);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "AdamW needs betas in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_min` at
/// `total_steps`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their joint L2 norm is at most `clip_norm`; returns the
/// factor applied (1 when already inside the ball).
pub fn clip_global_norm<T: Float>(grads: &mut [&mut [T]], clip_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm <= clip_norm {
        return 1.0;
    }
    let scale = clip_norm / norm;
    let s = T::from_f64_lossy(scale);
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x = *x * s);
    }
    scale
}

/// Global-norm clipping over the gradients of trainable parameters.
pub fn clip_param_grads<T: Float>(store: &mut ParamStore<T>, clip_norm: f64) -> f64 {
    let mut grads: Vec<&mut [T]> = store.iter_mut().filter(|p| p.trainable).map(|p| p.grad.as_mut_slice()).collect();
    clip_global_norm(&mut grads, clip_norm)
}

/// First and second moments per parameter; frozen parameters own none.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of scalars with allocated moment estimates.
    pub fn tracked(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }
}

/// One bias-corrected AdamW update with decoupled weight decay
/// (`w ← w·(1 − lr·wd)` before the Adam step, decay-flagged tensors only).
/// Non-finite gradients abort before any parameter changes.
pub fn adamw_step<T: Float>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            bail!(Numeric, "non-finite gradient in {} at index {i}", p.name);
        }
    }
    if state.m.len() < store.len() {
        state.m.resize(store.len(), Vec::new());
        state.v.resize(store.len(), Vec::new());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step_size = T::from_f64_lossy(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let eps = T::from_f64_lossy(cfg.eps);
    for (idx, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        if m.is_empty() {
            *m = vec![T::zero(); p.grad.len()];
            *v = vec![T::zero(); p.grad.len()];
        }
        let decay = if p.decay && cfg.weight_decay != 0.0 {
            Some(T::from_f64_lossy(1.0 - lr * cfg.weight_decay))
        } else {
            None
        };
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let g = p.grad[i];
            if let Some(d) = decay {
                w[i] = w[i] * d;
            }
            m[i] = b1t * m[i] + one_b1 * g;
            v[i] = b2t * v[i] + one_b2 * g * g;
            w[i] = w[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

/// Marks which parameters receive updates. Returns the trainable scalar
/// count. A fixed codebook stays frozen under every scope.
pub fn apply_finetune_scope<T: Float>(model: &mut LanguageModel<T>, scope: FinetuneScope) -> Result<usize> {
    let fixed_codebook = match &model.head {
        OutputHead::Vq(v) if !v.codebook_trainable => Some(v.codebook),
        _ => None,
    };
    let head = model.head.param_ids();
    let (g, b) = model.body.ln_f;
    let selected: Box<dyn Fn(crate::numerics::ParamId) -> bool> = match scope {
        FinetuneScope::FullModel => Box::new(|_| true),
        FinetuneScope::None => Box::new(|_| false),
        FinetuneScope::HeadAndFinalNorm => Box::new(move |id| head.contains(&id) || id == g || id == b),
        FinetuneScope::CodebookOnly => {
            let OutputHead::Vq(v) = &model.head else {
                bail!(Config, "codebook_only fine-tuning needs a quantized head");
            };
            if !v.codebook_trainable {
                bail!(Config, "codebook_only fine-tuning with a fixed codebook leaves nothing to train");
            }
            let c = v.codebook;
            Box::new(move |id| id == c)
        }
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let on = selected(id) && Some(id) != fixed_codebook;
        model.params.get_mut(id).trainable = on;
    }
    Ok(model.params.trainable_numel())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub ppl: f64,
    pub nll_sum: f64,
    pub tokens: usize,
}

impl EvalResult {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }
}

/// `exp(mean NLL)` over the first `max_batches` batches of one pass over
/// `stream` (all of them when `max_batches` is 0), with dropout off and the
/// installed head's default loss path.
pub fn evaluate_ppl<T: Float>(model: &LanguageModel<T>, stream: &mut BatchStream, max_batches: usize) -> Result<EvalResult> {
    stream.reset();
    let mut n = stream.batches_per_epoch();
    if max_batches > 0 {
        n = n.min(max_batches);
    }
    if n == 0 {
        bail!(Input, "evaluation stream holds no complete batch");
    }
    let mut tape = Tape::new();
    let mut nll_sum = 0.0;
    let mut tokens = 0;
    for _ in 0..n {
        let batch = stream.next_batch();
        tape.clear();
        let loss = model.loss(&mut tape, &batch, None, VqLossPath::Fused)?;
        nll_sum += tape.scalar(loss).as_f64() * batch.targets.len() as f64;
        tokens += batch.targets.len();
    }
    stream.reset();
    let ppl = (nll_sum / tokens as f64).exp();
    if !ppl.is_finite() {
        bail!(Numeric, "perplexity overflowed (mean NLL {})", nll_sum / tokens as f64);
    }
    Ok(EvalResult { ppl, nll_sum, tokens })
}

pub const METRICS_HEADER: &str = "step,loss,ppl,lr,tokens_per_sec";

/// One metrics-log line: the training loss of `step`, the validation
/// perplexity when an evaluation ran after it, and the learning rate used.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub ppl: Option<f64>,
    pub lr: f64,
    pub tokens_per_sec: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            self.loss,
            opt(self.ppl),
            self.lr,
            opt(self.tokens_per_sec)
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Writes `bytes` through a temporary sibling and a rename, so a crash never
/// leaves a truncated file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Where the training loop writes periodic artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub vocab: Option<&'a crate::data::Vocabulary>,
}

/// Runs `cfg.total_steps` optimizer steps on batches from `train`.
///
/// Each step: forward with dropout, head loss, backward, global-norm
/// clipping, AdamW at `lr_at(step)`. Every `eval_interval` steps the model
/// is evaluated on `valid` and, when configured, checkpointed. On a
/// non-finite loss or gradient the loop stops with a numeric error; the
/// parameters and the last checkpoint on disk are those of the last good
/// step.
pub fn train_loop<T: Float>(
    model: &mut LanguageModel<T>,
    cfg: &TrainConfig,
    train: &mut BatchStream,
    mut valid: Option<&mut BatchStream>,
    outputs: &TrainOutputs<'_>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if model.params.trainable_numel() == 0 && cfg.total_steps > 0 {
        bail!(Config, "no trainable parameters under the current scope");
    }
    let root = SeedStream::new(cfg.seed);
    let mut dropout_rng = root.child("dropout");
    let mut state = AdamState::new();
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(cfg.total_steps);
    let clock = Instant::now();
    let mut last_time = 0.0;
    for step in 1..=cfg.total_steps {
        let batch = train.next_batch();
        model.params.zero_grads();
        tape.clear();
        let loss = model.loss(&mut tape, &batch, Some(&mut dropout_rng), VqLossPath::Fused)?;
        let loss_value = tape.scalar(loss).as_f64();
        if !loss_value.is_finite() {
            bail!(Numeric, "loss diverged at step {step}");
        }
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut model.params);
        clip_param_grads(&mut model.params, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        adamw_step(&mut model.params, &mut state, lr, cfg)?;
        let tokens_per_sec = if cfg.log_throughput {
            let now = clock.elapsed().as_secs_f64();
            let dt = now - last_time;
            last_time = now;
            Some(batch.targets.len() as f64 / dt.max(1e-9))
        } else {
            None
        };
        let mut ppl = None;
        if cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
            if let Some(v) = valid.as_deref_mut() {
                ppl = Some(evaluate_ppl(model, v, cfg.eval_batches)?.ppl);
            }
            if let Some(path) = outputs.checkpoint {
                ModelCheckpoint::from_model(model, outputs.vocab.cloned()).save(path)?;
            }
            log::info!("step {step}: loss {loss_value:.4}, lr {lr:.3e}, valid ppl {ppl:?}");
            last_time = clock.elapsed().as_secs_f64();
        }
        rows.push(MetricRow {
            step,
            loss: loss_value,
            ppl,
            lr,
            tokens_per_sec,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
