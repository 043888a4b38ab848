//! Embedding-mix strategies for the second decoder pass.
//!
//! Pass 1 produces a score for every vocabulary word at every position.
//! Where scheduled sampling decides to use the model prediction instead of
//! the gold token, one of five strategies turns the score row into an input
//! vector: the argmax embedding, a top-k weighted average, a temperature
//! softmax mix over all words, a Gumbel-softmax sample, or a sparsemax mix.

use crate::autodiff::{kernels, Graph, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Argmax,
    Topk,
    Softmax,
    Gumbel,
    Sparsemax,
}

/// Strategy for building the prediction embedding from first-pass scores.
/// `alpha` is the temperature-like scale of the softmax and Gumbel mixes;
/// `k` is the top-k width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixStrategy {
    pub kind: MixKind,
    pub alpha: f64,
    pub k: usize,
}

impl MixStrategy {
    pub fn new(kind: MixKind, alpha: f64, k: usize) -> Result<Self> {
        let s = MixStrategy { kind, alpha, k };
        s.validate()?;
        Ok(s)
    }

    pub fn argmax() -> Self {
        MixStrategy {
            kind: MixKind::Argmax,
            alpha: 1.0,
            k: 5,
        }
    }

    pub fn topk(k: usize) -> Result<Self> {
        MixStrategy::new(MixKind::Topk, 1.0, k)
    }

    pub fn softmax(alpha: f64) -> Result<Self> {
        MixStrategy::new(MixKind::Softmax, alpha, 5)
    }

    pub fn gumbel(alpha: f64) -> Result<Self> {
        MixStrategy::new(MixKind::Gumbel, alpha, 5)
    }

    pub fn sparsemax() -> Self {
        MixStrategy {
            kind: MixKind::Sparsemax,
            alpha: 1.0,
            k: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mix alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("mix k must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Whether the strategy sums over all vocabulary words, which is what
    /// makes backpropagation into the first pass well defined.
    pub fn supports_backprop_through_first(&self) -> bool {
        matches!(
            self.kind,
            MixKind::Softmax | MixKind::Gumbel | MixKind::Sparsemax
        )
    }
}

/// Pre-softmax score matrix from decoder pass 1, living on the graph.
#[derive(Debug, Clone, Copy)]
pub struct FirstPassScores {
    pub logits: TensorRef,
}

/// Decoder inputs for pass 2: embedding-level vectors plus the per-position
/// record of which positions carry a model prediction (true) rather than
/// the gold token (false).
#[derive(Debug)]
pub struct MixedInputs {
    pub inputs: TensorRef,
    pub mix_mask: Vec<bool>,
}

// ---- pure single-row mixers ------------------------------------------------

fn weighted_average(table: &Tensor, weights: &[(usize, f64)]) -> Vec<f64> {
    let d = table.cols();
    let mut out = vec![0.0; d];
    for &(id, w) in weights {
        let row = &table.values()[id * d..(id + 1) * d];
        for (o, &e) in out.iter_mut().zip(row) {
            *o += w * e;
        }
    }
    out
}

/// Embedding of the highest-scored word; ties broken by lowest id.
pub fn mix_argmax(scores: &[f64], table: &Tensor) -> Vec<f64> {
    let id = kernels::argmax(scores);
    table.values()[id * table.cols()..(id + 1) * table.cols()].to_vec()
}

/// Top-k ids with weights softmax-renormalized over the selected raw scores.
pub fn topk_weights(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let ids = kernels::topk_indices(scores, k);
    let selected: Vec<f64> = ids.iter().map(|&i| scores[i]).collect();
    let w = kernels::softmax_weights(&selected, 1.0);
    ids.into_iter().zip(w).collect()
}

/// Weighted average of the top-k scored embeddings.
pub fn mix_topk(scores: &[f64], table: &Tensor, k: usize) -> Vec<f64> {
    weighted_average(table, &topk_weights(scores, k))
}

/// Mix of all embeddings weighted by softmax(alpha * scores).
pub fn mix_softmax(scores: &[f64], table: &Tensor, alpha: f64) -> Vec<f64> {
    let w = kernels::softmax_weights(scores, alpha);
    let pairs: Vec<(usize, f64)> = w.into_iter().enumerate().collect();
    weighted_average(table, &pairs)
}

/// Standard Gumbel noise from a uniform draw: G = -log(-log U), with U
/// clamped into (1e-12, 1 - 1e-12) so the tails stay finite.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| gumbel_from_uniform(rng.next_f64()))
        .collect()
}

/// Gumbel-softmax mix with explicit noise: weights are proportional to
/// exp(alpha * (score + noise)).
pub fn mix_gumbel_with_noise(
    scores: &[f64],
    table: &Tensor,
    alpha: f64,
    noise: &[f64],
) -> Vec<f64> {
    let perturbed: Vec<f64> = scores.iter().zip(noise).map(|(&s, &g)| s + g).collect();
    mix_softmax(&perturbed, table, alpha)
}

/// Gumbel-softmax mix drawing fresh noise from `rng`.
pub fn mix_gumbel(scores: &[f64], table: &Tensor, alpha: f64, rng: &mut Rng) -> Vec<f64> {
    let noise = sample_gumbel(scores.len(), rng);
    mix_gumbel_with_noise(scores, table, alpha, &noise)
}

/// Sparsemax projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    kernels::sparsemax(z)
}

/// Mix of embeddings weighted by sparsemax(scores); usually touches only a
/// few rows.
pub fn mix_sparsemax(scores: &[f64], table: &Tensor) -> Vec<f64> {
    let w = kernels::sparsemax(scores);
    let pairs: Vec<(usize, f64)> = w
        .into_iter()
        .enumerate()
        .filter(|&(_, wi)| wi > 0.0)
        .collect();
    weighted_average(table, &pairs)
}

// ---- batched second-pass input construction --------------------------------

/// The stochastic choices of one scheduled-sampling step, drawn up front so
/// the loss is a deterministic function of parameters given the plan.
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub tf_prob: f64,
    /// Flattened decoder-input row indices that use the model prediction.
    pub mixed_rows: Vec<usize>,
    /// Gumbel noise, one vocab-width row per mixed row, in `mixed_rows`
    /// order. Present only for the Gumbel strategy.
    pub gumbel_noise: Option<Vec<f64>>,
    /// Number of positions that were eligible for mixing.
    pub eligible: usize,
}

impl MixPlan {
    /// Fraction of eligible positions where the model prediction was used.
    pub fn mix_fraction(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.mixed_rows.len() as f64 / self.eligible as f64
        }
    }
}

fn validate_mix_request(
    tf_prob: f64,
    strategy: &MixStrategy,
    backprop_through_first: bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&tf_prob) {
        return Err(Error::Contract(format!(
            "teacher-forcing probability must be in [0, 1], got {}",
            tf_prob
        )));
    }
    strategy.validate()?;
    if backprop_through_first && !strategy.supports_backprop_through_first() {
        return Err(Error::Config(format!(
            "backprop through the first pass requires a dense mix (softmax, gumbel, sparsemax); {:?} is not supported",
            strategy.kind
        )));
    }
    Ok(())
}

/// Draw the per-position Bernoulli choices (and Gumbel noise where needed)
/// for one step. `input_ids` is the flattened [rows x row_len] decoder
/// input; position 0 of each row (BOS) and padding positions always keep
/// the gold token. Draws are taken in position order.
#[allow(clippy::too_many_arguments)]
pub fn draw_mix_plan(
    input_ids: &[usize],
    rows: usize,
    row_len: usize,
    pad_id: usize,
    tf_prob: f64,
    strategy: &MixStrategy,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<MixPlan> {
    validate_mix_request(tf_prob, strategy, false)?;
    debug_assert_eq!(input_ids.len(), rows * row_len);
    let mut mixed_rows = Vec::new();
    let mut noise = Vec::new();
    let mut eligible = 0usize;
    for b in 0..rows {
        for p in 1..row_len {
            let idx = b * row_len + p;
            if input_ids[idx] == pad_id {
                continue;
            }
            eligible += 1;
            let teacher_forced = rng.bernoulli(tf_prob);
            if !teacher_forced {
                mixed_rows.push(idx);
                if strategy.kind == MixKind::Gumbel {
                    noise.extend(sample_gumbel(vocab_size, rng));
                }
            }
        }
    }
    let gumbel_noise = (strategy.kind == MixKind::Gumbel).then_some(noise);
    Ok(MixPlan {
        tf_prob,
        mixed_rows,
        gumbel_noise,
        eligible,
    })
}

/// Build the pass-2 decoder inputs from a drawn plan.
///
/// Gold positions take the gold token's embedding row exactly. Each mixed
/// position at offset p within its sequence consumes the first-pass score
/// row at offset p-1, the row whose logits predict that token. When
/// `backprop_through_first` is false, score rows are detached before
/// mixing; otherwise gradients flow into the pass-1 computation.
pub fn apply_mix_plan(
    g: &mut Graph,
    table: TensorRef,
    first_pass: FirstPassScores,
    input_ids: &[usize],
    plan: &MixPlan,
    strategy: &MixStrategy,
    backprop_through_first: bool,
) -> Result<MixedInputs> {
    validate_mix_request(plan.tf_prob, strategy, backprop_through_first)?;
    let gold = g.embedding_lookup(table, input_ids)?;
    let mut mix_mask = vec![false; input_ids.len()];
    if plan.mixed_rows.is_empty() {
        return Ok(MixedInputs {
            inputs: gold,
            mix_mask,
        });
    }
    for &r in &plan.mixed_rows {
        mix_mask[r] = true;
    }

    let scores = if backprop_through_first {
        first_pass.logits
    } else {
        g.detach(first_pass.logits)
    };
    // Score row aligned to input row r is r - 1; eligibility guarantees
    // r mod row_len >= 1, so this never crosses a sequence boundary.
    let score_rows: Vec<usize> = plan.mixed_rows.iter().map(|&r| r - 1).collect();
    let gathered = g.gather_rows(scores, &score_rows)?;
    let vocab = g.value(gathered).cols();
    let n_mixed = plan.mixed_rows.len();

    let mixed = match strategy.kind {
        MixKind::Softmax => {
            let scaled = g.scale(gathered, strategy.alpha)?;
            let weights = g.softmax_rows(scaled)?;
            g.matmul(weights, table)?
        }
        MixKind::Gumbel => {
            let noise_vals = plan.gumbel_noise.as_ref().ok_or_else(|| {
                Error::Contract("gumbel strategy requires noise in the mix plan".to_string())
            })?;
            if noise_vals.len() != n_mixed * vocab {
                return Err(Error::Contract(format!(
                    "gumbel noise has {} values, expected {}",
                    noise_vals.len(),
                    n_mixed * vocab
                )));
            }
            let noise = g.constant(Tensor::matrix(n_mixed, vocab, noise_vals.clone())?);
            let perturbed = g.add(gathered, noise)?;
            let scaled = g.scale(perturbed, strategy.alpha)?;
            let weights = g.softmax_rows(scaled)?;
            g.matmul(weights, table)?
        }
        MixKind::Sparsemax => {
            let weights = g.sparsemax_rows(gathered)?;
            g.matmul(weights, table)?
        }
        MixKind::Argmax => {
            let ids: Vec<usize> = (0..n_mixed)
                .map(|m| {
                    let row = g.value(gathered).values();
                    kernels::argmax(&row[m * vocab..(m + 1) * vocab])
                })
                .collect();
            g.embedding_lookup(table, &ids)?
        }
        MixKind::Topk => {
            let k = strategy.k.min(vocab);
            let d = g.value(table).cols();
            // Per-row constant weights; gradient flows into the table only.
            let mut per_j_ids = vec![Vec::with_capacity(n_mixed); k];
            let mut per_j_w = vec![Vec::with_capacity(n_mixed); k];
            for m in 0..n_mixed {
                let row = &g.value(gathered).values()[m * vocab..(m + 1) * vocab];
                for (j, (id, w)) in topk_weights(row, k).into_iter().enumerate() {
                    per_j_ids[j].push(id);
                    per_j_w[j].push(w);
                }
            }
            let mut acc: Option<TensorRef> = None;
            for j in 0..k {
                let emb = g.embedding_lookup(table, &per_j_ids[j])?;
                let mut w_rep = Vec::with_capacity(n_mixed * d);
                for &w in &per_j_w[j] {
                    w_rep.extend(std::iter::repeat_n(w, d));
                }
                let w_c = g.constant(Tensor::matrix(n_mixed, d, w_rep)?);
                let term = g.mul(emb, w_c)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            acc.expect("k >= 1")
        }
    };

    let inputs = g.replace_rows(gold, mixed, &plan.mixed_rows)?;
    Ok(MixedInputs { inputs, mix_mask })
}

/// Draw a plan and apply it: the per-step scheduled-sampling input builder.
#[allow(clippy::too_many_arguments)]
pub fn build_second_pass_inputs(
    g: &mut Graph,
    table: TensorRef,
    first_pass: FirstPassScores,
    input_ids: &[usize],
    rows: usize,
    row_len: usize,
    pad_id: usize,
    tf_prob: f64,
    strategy: &MixStrategy,
    rng: &mut Rng,
    backprop_through_first: bool,
) -> Result<(MixedInputs, MixPlan)> {
    validate_mix_request(tf_prob, strategy, backprop_through_first)?;
    let vocab = g.value(first_pass.logits).cols();
    let plan = draw_mix_plan(
        input_ids, rows, row_len, pad_id, tf_prob, strategy, vocab, rng,
    )?;
    let mixed = apply_mix_plan(
        g,
        table,
        first_pass,
        input_ids,
        &plan,
        strategy,
        backprop_through_first,
    )?;
    Ok((mixed, plan))
}
