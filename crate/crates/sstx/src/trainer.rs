//! Training: the teacher-forced baseline step, the two-pass scheduled-
//! sampling step, Adam updates, evaluation, checkpointing and the training
//! loop.
//!
//! A step builds one graph: parameters are registered once, so the two
//! decoder passes share them structurally, and gradients from both uses of
//! a parameter accumulate into one slot. Loss is always cross-entropy of
//! the final (pass-2) logits against the gold targets.
//!
//! Randomness is split so that runs are reproducible and resumable: batch
//! selection is a stateless function of (seed, step); dropout masks and
//! mixing draws come from the run RNG whose 32-byte state is persisted in
//! checkpoints.

use crate::autodiff::{kernels, Graph, Tensor, TensorRef};
use crate::checkpoint::{self, CheckpointData, Entry};
use crate::error::{Error, Result};
use crate::mixing::{
    apply_mix_plan, draw_mix_plan, FirstPassScores, MixPlan, MixStrategy, MixedInputs,
};
use crate::rng::{derive_seed, streams, Rng};
use crate::scheduling::{learning_rate, TeacherForcingSchedule};
use crate::tasks::ParallelCorpus;
use crate::transformer::{DecoderInputs, Model, ModelRefs, TransformerConfig};
use std::path::{Path, PathBuf};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.998;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            warmup_steps: 400,
            lr_scale: 1.0,
            clip_norm: 5.0,
        }
    }
}

/// Baseline teacher forcing, or the two-pass scheduled-sampling procedure.
#[derive(Debug, Clone)]
pub enum TrainMode {
    Baseline,
    Scheduled {
        strategy: MixStrategy,
        schedule: TeacherForcingSchedule,
        backprop_through_first: bool,
    },
}

/// Optimizer + model state of one training run.
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    /// Adam first moments, aligned with `model.parameters()`.
    pub m: Vec<Tensor>,
    /// Adam second moments, aligned with `model.parameters()`.
    pub v: Vec<Tensor>,
    /// Run RNG: dropout masks and mixing draws, in execution order.
    pub rng: Rng,
    pub best_bleu: f64,
    pub best_step: u64,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let zeros: Vec<Tensor> = model
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            rng: Rng::seed_from_u64(derive_seed(seed, streams::RUN, 0)),
            model,
            best_bleu: f64::NEG_INFINITY,
            best_step: 0,
            best_checkpoint: None,
        }
    }
}

/// One right-padded batch. Target rows are [BOS, tokens.., EOS, PAD..];
/// `tgt_in` drops the final position, `tgt_out` drops BOS, and `tgt_keep`
/// marks non-pad target positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_keep: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_keep: Vec<bool>,
}

/// Assemble a batch from content-token pairs.
pub fn build_batch(pairs: &[(&[usize], &[usize])], config: &TransformerConfig) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot build an empty batch".to_string()));
    }
    for (i, (s, t)) in pairs.iter().enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(Error::Data(format!("batch pair {} has an empty side", i)));
        }
    }
    let batch = pairs.len();
    let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
    let full_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap() + 2; // BOS .. EOS
    let tgt_len = full_len - 1;
    let (pad, bos, eos) = (config.pad_id, config.bos_id, config.eos_id);

    let mut src = Vec::with_capacity(batch * src_len);
    let mut src_keep = Vec::with_capacity(batch * src_len);
    let mut tgt_in = Vec::with_capacity(batch * tgt_len);
    let mut tgt_out = Vec::with_capacity(batch * tgt_len);
    let mut tgt_keep = Vec::with_capacity(batch * tgt_len);
    for (s, t) in pairs {
        src.extend_from_slice(s);
        src.extend(std::iter::repeat_n(pad, src_len - s.len()));
        src_keep.extend(std::iter::repeat_n(true, s.len()));
        src_keep.extend(std::iter::repeat_n(false, src_len - s.len()));

        let mut full = Vec::with_capacity(full_len);
        full.push(bos);
        full.extend_from_slice(t);
        full.push(eos);
        full.extend(std::iter::repeat_n(pad, full_len - full.len()));
        tgt_in.extend_from_slice(&full[..tgt_len]);
        tgt_out.extend_from_slice(&full[1..]);
        tgt_keep.extend(full[1..].iter().map(|&id| id != pad));
    }
    Ok(Batch {
        batch,
        src_len,
        tgt_len,
        src,
        src_keep,
        tgt_in,
        tgt_out,
        tgt_keep,
    })
}

/// Deterministic batch for a step: indices drawn from a generator seeded by
/// (seed, step), independent of any run state.
pub fn batch_for_step(
    corpus: &ParallelCorpus,
    config: &TransformerConfig,
    seed: u64,
    step: u64,
    batch_size: usize,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::Contract(
            "cannot sample a batch from an empty corpus".to_string(),
        ));
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, streams::DATA, step));
    let n = corpus.len() as u64;
    let pairs: Vec<(&[usize], &[usize])> = (0..batch_size)
        .map(|_| {
            let i = rng.below(n) as usize;
            let (s, t) = &corpus.pairs[i];
            (s.as_slice(), t.as_slice())
        })
        .collect();
    build_batch(&pairs, config)
}

/// Teacher-forced loss graph: encode, one decoder pass on shifted gold
/// inputs, cross-entropy on gold targets.
pub fn baseline_loss(
    g: &mut Graph,
    model: &Model,
    refs: &ModelRefs,
    batch: &Batch,
    mut rng: Option<&mut Rng>,
) -> Result<(TensorRef, TensorRef)> {
    let memory = model.encode(
        g,
        refs,
        &batch.src,
        batch.batch,
        batch.src_len,
        &batch.src_keep,
        rng.as_deref_mut(),
    )?;
    let logits = model.decode(
        g,
        refs,
        &memory,
        DecoderInputs::Ids(&batch.tgt_in),
        batch.tgt_len,
        rng,
    )?;
    let loss = g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_keep)?;
    Ok((loss, logits))
}

/// Two-pass loss graph under a fixed mix plan.
///
/// Pass 1 decodes teacher-forced and yields per-position scores; the plan
/// mixes gold and prediction embeddings; pass 2 decodes the mix with the
/// same parameters; the loss is cross-entropy of pass-2 logits against the
/// gold targets. `frozen_first_pass` substitutes a constant score matrix
/// for pass 1 — that is the objective the no-backprop variant actually
/// optimizes, and what its finite-difference oracle must evaluate.
#[allow(clippy::too_many_arguments)]
pub fn two_pass_loss(
    g: &mut Graph,
    model: &Model,
    refs: &ModelRefs,
    batch: &Batch,
    plan: &MixPlan,
    strategy: &MixStrategy,
    backprop_through_first: bool,
    frozen_first_pass: Option<&Tensor>,
    mut rng: Option<&mut Rng>,
) -> Result<(TensorRef, FirstPassScores, MixedInputs)> {
    let memory = model.encode(
        g,
        refs,
        &batch.src,
        batch.batch,
        batch.src_len,
        &batch.src_keep,
        rng.as_deref_mut(),
    )?;
    let first = match frozen_first_pass {
        Some(t) => FirstPassScores {
            logits: g.constant(t.clone()),
        },
        None => FirstPassScores {
            logits: model.decode(
                g,
                refs,
                &memory,
                DecoderInputs::Ids(&batch.tgt_in),
                batch.tgt_len,
                rng.as_deref_mut(),
            )?,
        },
    };
    let table = model.target_embedding(refs);
    let mixed = apply_mix_plan(
        g,
        table,
        first,
        &batch.tgt_in,
        plan,
        strategy,
        backprop_through_first,
    )?;
    let logits = model.decode(
        g,
        refs,
        &memory,
        DecoderInputs::Embeddings(mixed.inputs),
        batch.tgt_len,
        rng,
    )?;
    let loss = g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_keep)?;
    Ok((loss, first, mixed))
}

/// Global-norm gradient clip; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.values().iter().map(|&v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.values_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Standard Adam with bias correction. `t` is the 1-based update count.
pub fn adam_update(
    params: &mut [crate::transformer::Parameter],
    grads: &[Tensor],
    m: &mut [Tensor],
    v: &mut [Tensor],
    t: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for ((p, g), (mi, vi)) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        let pv = p.tensor.values_mut();
        let gv = g.values();
        let mv = mi.values_mut();
        let vv = vi.values_mut();
        for i in 0..pv.len() {
            mv[i] = ADAM_BETA1 * mv[i] + (1.0 - ADAM_BETA1) * gv[i];
            vv[i] = ADAM_BETA2 * vv[i] + (1.0 - ADAM_BETA2) * gv[i] * gv[i];
            let mhat = mv[i] / bc1;
            let vhat = vv[i] / bc2;
            pv[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub tf_prob: f64,
    pub mix_fraction: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn collect_grads(g: &Graph, model: &Model, refs: &ModelRefs) -> Vec<Tensor> {
    model
        .parameters()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            g.grad(refs.param_ref(i))
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
        })
        .collect()
}

fn apply_update(
    state: &mut TrainState,
    g: &Graph,
    refs: &ModelRefs,
    optim: &OptimConfig,
) -> Result<(f64, f64)> {
    let mut grads = collect_grads(g, &state.model, refs);
    let norm = clip_global_norm(&mut grads, optim.clip_norm);
    if !norm.is_finite() {
        return Err(Error::numeric(
            "gradient",
            format!("non-finite gradient norm at step {}", state.step),
        ));
    }
    let t = state.step + 1;
    let lr = learning_rate(
        t,
        state.model.config.d_model,
        optim.warmup_steps,
        optim.lr_scale,
    )?;
    adam_update(
        state.model.parameters_mut(),
        &grads,
        &mut state.m,
        &mut state.v,
        t,
        lr,
    );
    state.step = t;
    Ok((lr, norm))
}

/// One teacher-forced baseline update.
pub fn train_step_baseline(
    state: &mut TrainState,
    batch: &Batch,
    optim: &OptimConfig,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let refs = state.model.register(&mut g, true);
    let (loss_ref, _) = baseline_loss(&mut g, &state.model, &refs, batch, Some(&mut state.rng))
        .map_err(|e| at_step(e, state.step))?;
    let loss = g.value(loss_ref).item();
    g.backward(loss_ref)?;
    let (lr, grad_norm) = apply_update(state, &g, &refs, optim)?;
    Ok(StepStats {
        loss,
        tf_prob: 1.0,
        mix_fraction: 0.0,
        lr,
        grad_norm,
    })
}

/// One two-pass scheduled-sampling update. The teacher-forcing probability
/// comes from the schedule at the current step; per-position choices and
/// Gumbel noise are drawn from the run RNG before the graph is built.
pub fn train_step_scheduled(
    state: &mut TrainState,
    batch: &Batch,
    strategy: &MixStrategy,
    schedule: &TeacherForcingSchedule,
    backprop_through_first: bool,
    optim: &OptimConfig,
) -> Result<StepStats> {
    // reject unsupported combinations before any compute or rng draws
    if backprop_through_first && !strategy.supports_backprop_through_first() {
        return Err(Error::Config(format!(
            "backprop through the first pass requires a dense mix; {:?} is not supported",
            strategy.kind
        )));
    }
    let tf_prob = schedule.tf_probability(state.step);
    let plan = draw_mix_plan(
        &batch.tgt_in,
        batch.batch,
        batch.tgt_len,
        state.model.config.pad_id,
        tf_prob,
        strategy,
        state.model.config.vocab_size,
        &mut state.rng,
    )?;
    let mut g = Graph::new();
    let refs = state.model.register(&mut g, true);
    let (loss_ref, _, _) = two_pass_loss(
        &mut g,
        &state.model,
        &refs,
        batch,
        &plan,
        strategy,
        backprop_through_first,
        None,
        Some(&mut state.rng),
    )
    .map_err(|e| at_step(e, state.step))?;
    let loss = g.value(loss_ref).item();
    g.backward(loss_ref)?;
    let (lr, grad_norm) = apply_update(state, &g, &refs, optim)?;
    Ok(StepStats {
        loss,
        tf_prob,
        mix_fraction: plan.mix_fraction(),
        lr,
        grad_norm,
    })
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{} (training step {})", detail, step),
        },
        other => other,
    }
}

/// Finite-difference error of the full two-pass loss against the analytic
/// gradients, over every model parameter, with fixed Bernoulli draws and
/// Gumbel noise.
///
/// Central differences carry an absolute noise floor around eps(loss)/2h,
/// so a relative comparison is meaningless at parameters whose true
/// gradient is incidentally tiny. This harness therefore searches seeds for
/// a plan with exactly `n_mixed` mixed positions where every analytic
/// gradient entry is either exactly zero or above 5e-6, and (for the
/// sparsemax mix) where no mixed score row sits near a support change. For
/// `backprop_through_first = false` the pass-1 scores are frozen constants:
/// that is the objective this mode optimizes.
pub fn two_pass_fd_error(
    model: &Model,
    batch: &Batch,
    strategy: &MixStrategy,
    backprop_through_first: bool,
    n_mixed: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let config = &model.config;
    let frozen_scores = || -> Result<Tensor> {
        let mut g = Graph::new();
        let refs = model.register(&mut g, false);
        let mem = model.encode(
            &mut g,
            &refs,
            &batch.src,
            batch.batch,
            batch.src_len,
            &batch.src_keep,
            None,
        )?;
        let logits = model.decode(
            &mut g,
            &refs,
            &mem,
            DecoderInputs::Ids(&batch.tgt_in),
            batch.tgt_len,
            None,
        )?;
        Ok(g.value(logits).clone())
    };

    'seeds: for attempt in 0..500u64 {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, 0xFD, attempt));
        let plan = draw_mix_plan(
            &batch.tgt_in,
            batch.batch,
            batch.tgt_len,
            config.pad_id,
            0.5,
            strategy,
            config.vocab_size,
            &mut rng,
        )?;
        if plan.mixed_rows.len() != n_mixed {
            continue;
        }
        let frozen = if backprop_through_first {
            None
        } else {
            Some(frozen_scores()?)
        };

        // analytic pass doubles as the conditioning check
        let mut g = Graph::new();
        let refs = model.register(&mut g, true);
        let (loss, first, _) = two_pass_loss(
            &mut g,
            model,
            &refs,
            batch,
            &plan,
            strategy,
            backprop_through_first,
            frozen.as_ref(),
            None,
        )?;
        g.backward(loss)?;
        for i in 0..model.parameters().len() {
            if let Some(grad) = g.grad(refs.param_ref(i)) {
                if grad.values().iter().any(|&v| v != 0.0 && v.abs() < 5e-6) {
                    continue 'seeds;
                }
            }
        }
        if strategy.kind == crate::mixing::MixKind::Sparsemax {
            let scores = g.value(first.logits);
            let v = scores.cols();
            for &r in &plan.mixed_rows {
                let row = &scores.values()[(r - 1) * v..r * v];
                let (margin, _) = kernels::sparsemax_support_margin(row);
                if margin < 100.0 * h {
                    continue 'seeds;
                }
            }
        }

        let tensors: Vec<Tensor> = model
            .parameters()
            .iter()
            .map(|p| p.tensor.clone())
            .collect();
        return crate::autodiff::check::grad_check(
            |g, refs_in| {
                let refs = ModelRefs::from_refs(refs_in.to_vec());
                let (loss, _, _) = two_pass_loss(
                    g,
                    model,
                    &refs,
                    batch,
                    &plan,
                    strategy,
                    backprop_through_first,
                    frozen.as_ref(),
                    None,
                )?;
                Ok(loss)
            },
            &tensors,
            h,
        );
    }
    Err(Error::Contract(
        "no finite-difference-checkable mix plan found within the seed budget".to_string(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub token_acc: f64,
    pub bleu: f64,
}

/// Teacher-forced loss and next-token accuracy plus BLEU of greedy decodes,
/// with dropout disabled.
pub fn evaluate(model: &Model, corpus: &ParallelCorpus, batch_size: usize) -> Result<EvalMetrics> {
    if corpus.is_empty() {
        return Err(Error::Contract(
            "evaluate requires a non-empty dataset".to_string(),
        ));
    }
    let mut loss_sum = 0.0;
    let mut kept_total = 0usize;
    let mut correct = 0usize;
    for chunk in corpus.pairs.chunks(batch_size.max(1)) {
        let pairs: Vec<(&[usize], &[usize])> = chunk
            .iter()
            .map(|(s, t)| (s.as_slice(), t.as_slice()))
            .collect();
        let batch = build_batch(&pairs, &model.config)?;
        let mut g = Graph::new();
        let refs = model.register(&mut g, false);
        let (loss_ref, logits_ref) = baseline_loss(&mut g, model, &refs, &batch, None)?;
        let n_kept = batch.tgt_keep.iter().filter(|&&k| k).count();
        loss_sum += g.value(loss_ref).item() * n_kept as f64;
        kept_total += n_kept;
        let logits = g.value(logits_ref);
        let vocab = logits.cols();
        for (row, (&target, &keep)) in batch.tgt_out.iter().zip(&batch.tgt_keep).enumerate() {
            if keep {
                let pred = kernels::argmax(&logits.values()[row * vocab..(row + 1) * vocab]);
                if pred == target {
                    correct += 1;
                }
            }
        }
    }

    let max_decode = model.config.max_len - 1;
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs_out = Vec::with_capacity(corpus.len());
    for (src, tgt) in &corpus.pairs {
        hyps.push(model.greedy_decode(src, max_decode)?);
        refs_out.push(tgt.clone());
    }
    let bleu = crate::bleu::corpus_bleu(&hyps, &refs_out, 4)?;
    Ok(EvalMetrics {
        loss: loss_sum / kept_total as f64,
        token_acc: correct as f64 / kept_total as f64,
        bleu,
    })
}

// ---- checkpoint plumbing ----------------------------------------------------

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(state.model.parameters().len() * 3);
    for p in state.model.parameters() {
        entries.push(Entry {
            name: p.name.clone(),
            tensor: p.tensor.clone(),
        });
    }
    for (p, m) in state.model.parameters().iter().zip(&state.m) {
        entries.push(Entry {
            name: format!("adam.m.{}", p.name),
            tensor: m.clone(),
        });
    }
    for (p, v) in state.model.parameters().iter().zip(&state.v) {
        entries.push(Entry {
            name: format!("adam.v.{}", p.name),
            tensor: v.clone(),
        });
    }
    checkpoint::save(
        &CheckpointData {
            entries,
            step: state.step,
            rng_state: state.rng.state_bytes(),
        },
        path,
    )
}

/// Rebuild a training state from a checkpoint. The model architecture is
/// not stored in the file and must be supplied.
pub fn load_checkpoint(path: &Path, config: &TransformerConfig) -> Result<TrainState> {
    let data = checkpoint::load(path)?;
    let model = Model::new(config.clone(), 0)?;
    let mut state = TrainState::new(model, 0);
    let mut by_name: std::collections::HashMap<&str, &Entry> =
        data.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    fn take<'a>(
        map: &mut std::collections::HashMap<&str, &'a Entry>,
        key: &str,
    ) -> Result<&'a Entry> {
        map.remove(key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing entry {}", key)))
    }
    let names: Vec<String> = state
        .model
        .parameters()
        .iter()
        .map(|p| p.name.clone())
        .collect();
    for (i, name) in names.iter().enumerate() {
        let p = take(&mut by_name, name)?;
        let m = take(&mut by_name, &format!("adam.m.{}", name))?;
        let v = take(&mut by_name, &format!("adam.v.{}", name))?;
        let expect = state.model.parameters()[i].tensor.shape().to_vec();
        for (label, e) in [("parameter", p), ("adam.m", m), ("adam.v", v)] {
            if e.tensor.shape() != expect.as_slice() {
                return Err(Error::Format(format!(
                    "{} {} has shape {:?}, model expects {:?}",
                    label,
                    name,
                    e.tensor.shape(),
                    expect
                )));
            }
        }
        state.model.parameters_mut()[i].tensor = p.tensor.clone();
        state.m[i] = m.tensor.clone();
        state.v[i] = v.tensor.clone();
    }
    if !by_name.is_empty() {
        let extra: Vec<&str> = by_name.keys().copied().collect();
        return Err(Error::Format(format!(
            "checkpoint has unknown entries: {:?}",
            extra
        )));
    }
    state.step = data.step;
    state.rng = Rng::from_state_bytes(&data.rng_state)?;
    Ok(state)
}

// ---- training loop -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub max_steps: u64,
    pub validation_interval: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Stop at a validation once accuracy and BLEU both reach these bars;
    /// `None` disables early stopping.
    pub early_stop: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: &'static str,
    pub loss: f64,
    pub token_acc: f64,
    pub bleu: f64,
    pub tf_prob: f64,
    pub mix_fraction: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,split,loss,token_acc,bleu,tf_prob,mix_fraction,lr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.split,
            self.loss,
            self.token_acc,
            self.bleu,
            self.tf_prob,
            self.mix_fraction,
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub steps_run: u64,
    pub stopped_early: bool,
    pub best_step: u64,
    pub best_dev: EvalMetrics,
    pub test: EvalMetrics,
    pub metrics: Vec<MetricsRow>,
    pub metrics_path: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub mean_step_seconds: f64,
}

/// Run training over generated or loaded corpora: validate every
/// `validation_interval` steps (including step 0), track the best dev BLEU,
/// write one metrics row per validation, and report dev/test metrics of the
/// best checkpoint.
pub fn train_loop(
    state: &mut TrainState,
    mode: &TrainMode,
    optim: &OptimConfig,
    data: &crate::tasks::TaskSplits,
    cfg: &LoopConfig,
) -> Result<RunReport> {
    if cfg.validation_interval == 0 {
        return Err(Error::Config(
            "validation_interval must be >= 1".to_string(),
        ));
    }
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut csv: Option<std::fs::File> = None;
    let mut metrics_path = None;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let mut f = std::fs::File::create(&path)?;
        use std::io::Write;
        writeln!(f, "{}", METRICS_HEADER)?;
        csv = Some(f);
        metrics_path = Some(path);
    }

    let mut best_params: Vec<Tensor> = Vec::new();
    let mut best_dev = EvalMetrics {
        loss: f64::INFINITY,
        token_acc: 0.0,
        bleu: f64::NEG_INFINITY,
    };
    let mut window_mix = 0.0f64;
    let mut window_steps = 0u64;
    let mut stopped_early = false;
    let mut step_seconds = 0.0f64;
    let mut timed_steps = 0u64;

    macro_rules! validate_now {
        () => {{
            let dev = evaluate(&state.model, &data.dev, cfg.batch_size)?;
            let tf_prob = match mode {
                TrainMode::Baseline => 1.0,
                TrainMode::Scheduled { schedule, .. } => schedule.tf_probability(state.step),
            };
            let lr = learning_rate(
                state.step.max(1),
                state.model.config.d_model,
                optim.warmup_steps,
                optim.lr_scale,
            )?;
            let mix_fraction = if window_steps == 0 {
                0.0
            } else {
                window_mix / window_steps as f64
            };
            let row = MetricsRow {
                step: state.step,
                split: "dev",
                loss: dev.loss,
                token_acc: dev.token_acc,
                bleu: dev.bleu,
                tf_prob,
                mix_fraction,
                lr,
            };
            if let Some(f) = csv.as_mut() {
                use std::io::Write;
                writeln!(f, "{}", row.to_csv())?;
            }
            metrics.push(row);
            window_mix = 0.0;
            window_steps = 0;
            if dev.bleu > state.best_bleu {
                state.best_bleu = dev.bleu;
                state.best_step = state.step;
                best_dev = dev;
                best_params = state
                    .model
                    .parameters()
                    .iter()
                    .map(|p| p.tensor.clone())
                    .collect();
                if let Some(dir) = &cfg.out_dir {
                    let path = dir.join("best.sstx");
                    save_checkpoint(state, &path)?;
                    state.best_checkpoint = Some(path);
                }
            }
            if let Some(dir) = &cfg.out_dir {
                save_checkpoint(state, &dir.join("last.sstx"))?;
            }
            dev
        }};
    }

    let dev0 = validate_now!();
    if let Some((acc_bar, bleu_bar)) = cfg.early_stop {
        if dev0.token_acc >= acc_bar && dev0.bleu >= bleu_bar {
            stopped_early = true;
        }
    }

    while !stopped_early && state.step < cfg.max_steps {
        let batch = batch_for_step(
            &data.train,
            &state.model.config,
            cfg.seed,
            state.step,
            cfg.batch_size,
        )?;
        let t0 = std::time::Instant::now();
        let stats = match mode {
            TrainMode::Baseline => train_step_baseline(state, &batch, optim)?,
            TrainMode::Scheduled {
                strategy,
                schedule,
                backprop_through_first,
            } => train_step_scheduled(
                state,
                &batch,
                strategy,
                schedule,
                *backprop_through_first,
                optim,
            )?,
        };
        step_seconds += t0.elapsed().as_secs_f64();
        timed_steps += 1;
        window_mix += stats.mix_fraction;
        window_steps += 1;

        if state.step.is_multiple_of(cfg.validation_interval) {
            let dev = validate_now!();
            if let Some((acc_bar, bleu_bar)) = cfg.early_stop {
                if dev.token_acc >= acc_bar && dev.bleu >= bleu_bar {
                    stopped_early = true;
                }
            }
        }
    }

    // Dev/test metrics of the best checkpoint.
    let mut best_model = Model::new(state.model.config.clone(), 0)?;
    for (p, t) in best_model.parameters_mut().iter_mut().zip(&best_params) {
        p.tensor = t.clone();
    }
    let test = evaluate(&best_model, &data.test, cfg.batch_size)?;

    Ok(RunReport {
        steps_run: state.step,
        stopped_early,
        best_step: state.best_step,
        best_dev,
        test,
        metrics,
        metrics_path,
        best_checkpoint: state.best_checkpoint.clone(),
        mean_step_seconds: if timed_steps == 0 {
            0.0
        } else {
            step_seconds / timed_steps as f64
        },
    })
}
