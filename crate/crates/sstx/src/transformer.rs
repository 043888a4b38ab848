//! Miniature transformer encoder-decoder.
//!
//! The decoder accepts either token ids or externally supplied
//! word-embedding-level vectors; positional encoding and the sqrt(d_model)
//! scale are applied inside `decode` for both paths, so the two differ only
//! in word identity. That hook is what the two-pass scheduled-sampling
//! procedure plugs into.
//!
//! Pre-norm residual blocks with a final layer norm per stack. Attention
//! masks are additive constants (0 or -1e30): a -1e30 entry absorbs any
//! realistic score without changing its own floating-point value, and the
//! max-subtracted exp underflows to exactly 0, which keeps masked positions
//! bit-exactly invisible.

use crate::autodiff::{kernels, Graph, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, streams, Rng};
use serde::{Deserialize, Serialize};

const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub share_embeddings: bool,
    pub share_decoder_out_embedding: bool,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl TransformerConfig {
    /// Desk-scale preset: CPU-trainable in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab_size,
            max_len: 32,
            dropout_rate: 0.0,
            share_embeddings: true,
            share_decoder_out_embedding: true,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Full-scale preset matching the published hyperparameter table.
    pub fn full_scale(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            vocab_size,
            max_len: 512,
            dropout_rate: 0.2,
            share_embeddings: true,
            share_decoder_out_embedding: true,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model must be even, got {}",
                self.d_model
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "n_layers, d_ff and max_len must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let ids = [self.pad_id, self.bos_id, self.eos_id];
        if ids.iter().any(|&i| i >= self.vocab_size) {
            return Err(Error::Config(
                "pad/bos/eos ids must be < vocab_size".to_string(),
            ));
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(Error::Config(
                "pad/bos/eos ids must be distinct".to_string(),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal position table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos of the same argument. Deterministic, non-learned.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding requires even d_model, got {}",
            d_model
        )));
    }
    let mut values = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            values[pos * d_model + 2 * i] = angle.sin();
            values[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(max_len, d_model, values)
}

/// Row-major n x n boolean mask; entry (i, j) is true when position i may
/// attend to position j, i.e. j <= i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            mask[i * n + j] = true;
        }
    }
    mask
}

/// Handle to one named parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

// No key bias: shifting every key by a constant adds the same offset to
// each query row's scores, which softmax cancels, so such a parameter
// would be exactly gradient-free.
#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIds {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIds {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_layers: Vec<EncLayerIds>,
    dec_layers: Vec<DecLayerIds>,
    enc_final: NormIds,
    dec_final: NormIds,
    out_proj: Option<ParamId>,
}

/// Transformer model parameters plus the fixed positional table. The same
/// type serves the teacher-forcing baseline and the scheduled-sampling
/// procedure: the two decoder passes add zero parameters.
pub struct Model {
    pub config: TransformerConfig,
    params: Vec<Parameter>,
    layout: Layout,
    pos_table: Tensor,
}

/// Per-graph registration of every parameter, in declaration order.
pub struct ModelRefs {
    refs: Vec<TensorRef>,
}

impl ModelRefs {
    fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    /// Graph reference of the i-th parameter (declaration order).
    pub fn param_ref(&self, index: usize) -> TensorRef {
        self.refs[index]
    }

    /// Wrap already-registered parameter references, in declaration order.
    /// Lets gradient-checking harnesses register the leaves themselves.
    pub fn from_refs(refs: Vec<TensorRef>) -> Self {
        ModelRefs { refs }
    }
}

/// Attention parameter references for the standalone attention operation.
#[derive(Debug, Clone, Copy)]
pub struct AttnRefs {
    pub wq: TensorRef,
    pub bq: TensorRef,
    pub wk: TensorRef,
    pub wv: TensorRef,
    pub bv: TensorRef,
    pub wo: TensorRef,
    pub bo: TensorRef,
}

/// Encoder output for one batch: flattened [batch * src_len x d_model]
/// activations plus the source keep-mask (true = real token).
pub struct Memory {
    pub out: TensorRef,
    pub batch: usize,
    pub src_len: usize,
    pub src_keep: Vec<bool>,
}

/// Decoder input: token ids, or word-embedding-level vectors of shape
/// [batch * tgt_len x d_model].
pub enum DecoderInputs<'a> {
    Ids(&'a [usize]),
    Embeddings(TensorRef),
}

struct ParamBuilder {
    params: Vec<Parameter>,
    rng: Rng,
}

impl ParamBuilder {
    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.params.push(Parameter { name, tensor });
        ParamId(self.params.len() - 1)
    }

    fn xavier(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let vals = (0..rows * cols)
            .map(|_| self.rng.uniform(-limit, limit))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, vals).expect("init"))
    }

    fn zeros_vec(&mut self, name: String, n: usize) -> ParamId {
        self.add(name, Tensor::vector(vec![0.0; n]).expect("init"))
    }

    fn ones_vec(&mut self, name: String, n: usize) -> ParamId {
        self.add(name, Tensor::vector(vec![1.0; n]).expect("init"))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.xavier(format!("{prefix}.wq"), d, d),
            bq: self.zeros_vec(format!("{prefix}.bq"), d),
            wk: self.xavier(format!("{prefix}.wk"), d, d),
            wv: self.xavier(format!("{prefix}.wv"), d, d),
            bv: self.zeros_vec(format!("{prefix}.bv"), d),
            wo: self.xavier(format!("{prefix}.wo"), d, d),
            bo: self.zeros_vec(format!("{prefix}.bo"), d),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.ones_vec(format!("{prefix}.gain"), d),
            bias: self.zeros_vec(format!("{prefix}.bias"), d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            w1: self.xavier(format!("{prefix}.w1"), d, d_ff),
            b1: self.zeros_vec(format!("{prefix}.b1"), d_ff),
            w2: self.xavier(format!("{prefix}.w2"), d_ff, d),
            b2: self.zeros_vec(format!("{prefix}.b2"), d),
        }
    }
}

impl Model {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: Rng::seed_from_u64(derive_seed(seed, streams::INIT, 0)),
        };
        let d = config.d_model;
        let v = config.vocab_size;

        // Embedding rows at std 0.5/sqrt(d): after the sqrt(d) input scale
        // rows are O(1), and tied output logits start near zero so the
        // initial loss sits close to ln(vocab).
        let limit = (0.75 / d as f64).sqrt();
        let emb_vals: Vec<f64> = (0..v * d).map(|_| b.rng.uniform(-limit, limit)).collect();
        let tgt_embed = b.add(
            "embed.tgt".to_string(),
            Tensor::matrix(v, d, emb_vals).expect("init"),
        );
        let src_embed = if config.share_embeddings {
            tgt_embed
        } else {
            let vals: Vec<f64> = (0..v * d).map(|_| b.rng.uniform(-limit, limit)).collect();
            b.add(
                "embed.src".to_string(),
                Tensor::matrix(v, d, vals).expect("init"),
            )
        };

        let enc_layers: Vec<EncLayerIds> = (0..config.n_layers)
            .map(|l| EncLayerIds {
                ln1: b.norm(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.self"), d),
                ln2: b.norm(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.d_ff),
            })
            .collect();
        let enc_final = b.norm("enc.final", d);

        let dec_layers: Vec<DecLayerIds> = (0..config.n_layers)
            .map(|l| DecLayerIds {
                ln1: b.norm(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.norm(&format!("dec.{l}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.norm(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.d_ff),
            })
            .collect();
        let dec_final = b.norm("dec.final", d);

        let out_proj = if config.share_decoder_out_embedding {
            None
        } else {
            Some(b.xavier("out_proj".to_string(), d, v))
        };

        let pos_table = positional_encoding(config.max_len, d)?;
        Ok(Model {
            layout: Layout {
                src_embed,
                tgt_embed,
                enc_layers,
                dec_layers,
                enc_final,
                dec_final,
                out_proj,
            },
            params: b.params,
            pos_table,
            config,
        })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Register every parameter on a graph; `trainable` controls whether
    /// gradients will be accumulated for them.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelRefs {
        let refs = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        ModelRefs { refs }
    }

    /// Reference to the target-side embedding table (the table mixed
    /// embeddings are built from).
    pub fn target_embedding(&self, refs: &ModelRefs) -> TensorRef {
        refs.get(self.layout.tgt_embed)
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: TensorRef,
        rng: &mut Option<&mut Rng>,
    ) -> Result<TensorRef> {
        let rate = self.config.dropout_rate;
        if rate == 0.0 {
            return Ok(x);
        }
        let Some(r) = rng.as_deref_mut() else {
            return Ok(x);
        };
        let t = g.value(x);
        let shape = t.shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if r.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    fn norm(
        &self,
        g: &mut Graph,
        refs: &ModelRefs,
        ids: NormIds,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let n = g.layer_norm(x, 1e-5)?;
        let scaled = g.mul(n, refs.get(ids.gain))?;
        g.add(scaled, refs.get(ids.bias))
    }

    fn ffn(&self, g: &mut Graph, refs: &ModelRefs, ids: FfnIds, x: TensorRef) -> Result<TensorRef> {
        let h = g.matmul(x, refs.get(ids.w1))?;
        let h = g.add(h, refs.get(ids.b1))?;
        let h = g.relu(h)?;
        let h = g.matmul(h, refs.get(ids.w2))?;
        g.add(h, refs.get(ids.b2))
    }

    fn attn_refs(&self, refs: &ModelRefs, ids: AttnIds) -> AttnRefs {
        AttnRefs {
            wq: refs.get(ids.wq),
            bq: refs.get(ids.bq),
            wk: refs.get(ids.wk),
            wv: refs.get(ids.wv),
            bv: refs.get(ids.bv),
            wo: refs.get(ids.wo),
            bo: refs.get(ids.bo),
        }
    }

    /// Positional rows 0..len repeated for each batch element, as a
    /// constant [batch * len x d] tensor.
    fn position_block(&self, g: &mut Graph, batch: usize, len: usize) -> Result<TensorRef> {
        let d = self.config.d_model;
        let row_block = &self.pos_table.values()[..len * d];
        let mut vals = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            vals.extend_from_slice(row_block);
        }
        Ok(g.constant(Tensor::matrix(batch * len, d, vals)?))
    }

    /// Additive attention mask from a boolean allow matrix.
    fn additive_mask(g: &mut Graph, allow: &[bool], n: usize, m: usize) -> Result<TensorRef> {
        let vals: Vec<f64> = allow
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_OFF })
            .collect();
        Ok(g.constant(Tensor::matrix(n, m, vals)?))
    }

    /// Encoder: embeddings scaled by sqrt(d_model) plus positional encoding,
    /// through the self-attention + feed-forward stack. `src_ids` is the
    /// flattened right-padded [batch x src_len] id matrix and `src_keep`
    /// marks real (non-pad) tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph,
        refs: &ModelRefs,
        src_ids: &[usize],
        batch: usize,
        src_len: usize,
        src_keep: &[bool],
        mut rng: Option<&mut Rng>,
    ) -> Result<Memory> {
        if src_len > self.config.max_len {
            return Err(Error::Contract(format!(
                "source length {} exceeds max_len {}",
                src_len, self.config.max_len
            )));
        }
        if src_ids.len() != batch * src_len || src_keep.len() != batch * src_len {
            return Err(Error::shape(
                "encode",
                format!(
                    "{} ids for batch {} x len {}",
                    src_ids.len(),
                    batch,
                    src_len
                ),
            ));
        }
        for b in 0..batch {
            if !src_keep[b * src_len..(b + 1) * src_len].iter().any(|&k| k) {
                return Err(Error::Contract(format!(
                    "source sequence {} is entirely padding",
                    b
                )));
            }
        }

        let d = self.config.d_model;
        let emb = g.embedding_lookup(refs.get(self.layout.src_embed), src_ids)?;
        let emb = g.scale(emb, (d as f64).sqrt())?;
        let pos = self.position_block(g, batch, src_len)?;
        let mut x = g.add(emb, pos)?;
        x = self.dropout(g, x, &mut rng)?;

        // Per-sequence self-attention mask: keys at padding are hidden from
        // every query. Pad queries produce values that nothing consumes.
        let mut masks = Vec::with_capacity(batch);
        for b in 0..batch {
            let keep = &src_keep[b * src_len..(b + 1) * src_len];
            let mut allow = vec![false; src_len * src_len];
            for i in 0..src_len {
                for j in 0..src_len {
                    allow[i * src_len + j] = keep[j];
                }
            }
            masks.push(Self::additive_mask(g, &allow, src_len, src_len)?);
        }

        for layer in &self.layout.enc_layers {
            let normed = self.norm(g, refs, layer.ln1, x)?;
            let attn =
                self.batched_self_attention(g, refs, layer.attn, normed, batch, src_len, &masks)?;
            let attn = self.dropout(g, attn, &mut rng)?;
            x = g.add(x, attn)?;

            let normed = self.norm(g, refs, layer.ln2, x)?;
            let ff = self.ffn(g, refs, layer.ffn, normed)?;
            let ff = self.dropout(g, ff, &mut rng)?;
            x = g.add(x, ff)?;
        }
        let out = self.norm(g, refs, self.layout.enc_final, x)?;
        Ok(Memory {
            out,
            batch,
            src_len,
            src_keep: src_keep.to_vec(),
        })
    }

    /// Decoder over flattened [batch x tgt_len] inputs. Produces logits
    /// [batch * tgt_len x vocab]. The causal mask is always applied; both
    /// decoder passes of scheduled sampling run this same operation with
    /// the same parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        refs: &ModelRefs,
        memory: &Memory,
        inputs: DecoderInputs,
        tgt_len: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<TensorRef> {
        if tgt_len > self.config.max_len {
            return Err(Error::Contract(format!(
                "target length {} exceeds max_len {}",
                tgt_len, self.config.max_len
            )));
        }
        let batch = memory.batch;
        let d = self.config.d_model;
        let emb = match inputs {
            DecoderInputs::Ids(ids) => {
                if ids.len() != batch * tgt_len {
                    return Err(Error::shape(
                        "decode",
                        format!("{} ids for batch {} x len {}", ids.len(), batch, tgt_len),
                    ));
                }
                g.embedding_lookup(refs.get(self.layout.tgt_embed), ids)?
            }
            DecoderInputs::Embeddings(e) => {
                let t = g.value(e);
                if t.shape() != [batch * tgt_len, d] {
                    return Err(Error::shape(
                        "decode",
                        format!(
                            "embeddings {:?}, expected [{} x {}]",
                            t.shape(),
                            batch * tgt_len,
                            d
                        ),
                    ));
                }
                e
            }
        };
        let emb = g.scale(emb, (d as f64).sqrt())?;
        let pos = self.position_block(g, batch, tgt_len)?;
        let mut x = g.add(emb, pos)?;
        x = self.dropout(g, x, &mut rng)?;

        let causal = causal_mask(tgt_len);
        let causal_add = Self::additive_mask(g, &causal, tgt_len, tgt_len)?;
        let causal_masks = vec![causal_add; batch];

        let mut cross_masks = Vec::with_capacity(batch);
        for b in 0..batch {
            let keep = &memory.src_keep[b * memory.src_len..(b + 1) * memory.src_len];
            let mut allow = vec![false; tgt_len * memory.src_len];
            for i in 0..tgt_len {
                for j in 0..memory.src_len {
                    allow[i * memory.src_len + j] = keep[j];
                }
            }
            cross_masks.push(Self::additive_mask(g, &allow, tgt_len, memory.src_len)?);
        }

        for layer in &self.layout.dec_layers {
            let normed = self.norm(g, refs, layer.ln1, x)?;
            let attn = self.batched_self_attention(
                g,
                refs,
                layer.self_attn,
                normed,
                batch,
                tgt_len,
                &causal_masks,
            )?;
            let attn = self.dropout(g, attn, &mut rng)?;
            x = g.add(x, attn)?;

            let normed = self.norm(g, refs, layer.ln2, x)?;
            let attn = self.batched_cross_attention(
                g,
                refs,
                layer.cross_attn,
                normed,
                memory,
                batch,
                tgt_len,
                &cross_masks,
            )?;
            let attn = self.dropout(g, attn, &mut rng)?;
            x = g.add(x, attn)?;

            let normed = self.norm(g, refs, layer.ln3, x)?;
            let ff = self.ffn(g, refs, layer.ffn, normed)?;
            let ff = self.dropout(g, ff, &mut rng)?;
            x = g.add(x, ff)?;
        }
        let h = self.norm(g, refs, self.layout.dec_final, x)?;

        match self.layout.out_proj {
            Some(w) => g.matmul(h, refs.get(w)),
            None => {
                let et = g.transpose(refs.get(self.layout.tgt_embed))?;
                g.matmul(h, et)
            }
        }
    }

    /// Project q/k/v once over the flattened batch, run scaled dot-product
    /// attention per sequence block, then apply the output projection.
    #[allow(clippy::too_many_arguments)]
    fn batched_attention(
        &self,
        g: &mut Graph,
        p: AttnRefs,
        q_in: TensorRef,
        kv_in: TensorRef,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        masks: &[TensorRef],
    ) -> Result<TensorRef> {
        let q = g.matmul(q_in, p.wq)?;
        let q = g.add(q, p.bq)?;
        let k = g.matmul(kv_in, p.wk)?;
        let v = g.matmul(kv_in, p.wv)?;
        let v = g.add(v, p.bv)?;

        let mut blocks = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = g.slice(q, 0, b * q_len, q_len)?;
            let kb = g.slice(k, 0, b * kv_len, kv_len)?;
            let vb = g.slice(v, 0, b * kv_len, kv_len)?;
            blocks.push(attention_core(
                g,
                qb,
                kb,
                vb,
                masks[b],
                self.config.n_heads,
            )?);
        }
        let merged = if blocks.len() == 1 {
            blocks[0]
        } else {
            g.concat(&blocks, 0)?
        };
        let out = g.matmul(merged, p.wo)?;
        g.add(out, p.bo)
    }

    #[allow(clippy::too_many_arguments)]
    fn batched_self_attention(
        &self,
        g: &mut Graph,
        refs: &ModelRefs,
        ids: AttnIds,
        x: TensorRef,
        batch: usize,
        len: usize,
        masks: &[TensorRef],
    ) -> Result<TensorRef> {
        self.batched_attention(g, self.attn_refs(refs, ids), x, x, batch, len, len, masks)
    }

    #[allow(clippy::too_many_arguments)]
    fn batched_cross_attention(
        &self,
        g: &mut Graph,
        refs: &ModelRefs,
        ids: AttnIds,
        x: TensorRef,
        memory: &Memory,
        batch: usize,
        tgt_len: usize,
        masks: &[TensorRef],
    ) -> Result<TensorRef> {
        self.batched_attention(
            g,
            self.attn_refs(refs, ids),
            x,
            memory.out,
            batch,
            tgt_len,
            memory.src_len,
            masks,
        )
    }

    /// Greedy decoding for one source sequence: start from BOS, repeatedly
    /// append the argmax token (ties to the lowest id), stop on EOS or
    /// `max_len`. Runs without gradients or dropout.
    pub fn greedy_decode(&self, src_ids: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.config.max_len);
        let mut g = Graph::new();
        let refs = self.register(&mut g, false);
        let keep = vec![true; src_ids.len()];
        let memory = self.encode(&mut g, &refs, src_ids, 1, src_ids.len(), &keep, None)?;

        let mut out = Vec::new();
        let mut prefix = vec![self.config.bos_id];
        loop {
            let logits = self.decode(
                &mut g,
                &refs,
                &memory,
                DecoderInputs::Ids(&prefix),
                prefix.len(),
                None,
            )?;
            let t = g.value(logits);
            let v = t.cols();
            let last = &t.values()[(prefix.len() - 1) * v..prefix.len() * v];
            let next = kernels::argmax(last);
            if next == self.config.eos_id {
                break;
            }
            out.push(next);
            prefix.push(next);
            if out.len() >= max_len {
                break;
            }
        }
        Ok(out)
    }
}

/// Scaled dot-product attention over already-projected q/k/v for one
/// sequence: per head, softmax(q k^T / sqrt(d_head) + mask) v, heads
/// concatenated. `add_mask` is the additive [q_len x kv_len] mask constant.
pub fn attention_core(
    g: &mut Graph,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    add_mask: TensorRef,
    n_heads: usize,
) -> Result<TensorRef> {
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.add(scores, add_mask)?;
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat(&heads, 1)
    }
}

/// Standalone multi-head attention: projects raw queries/keys/values,
/// applies scaled dot-product attention under a boolean allow-mask, and
/// projects the concatenated heads. A query row with every position masked
/// cannot be normalized and is rejected.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: TensorRef,
    keys: TensorRef,
    values: TensorRef,
    mask: &[bool],
    n_heads: usize,
    p: &AttnRefs,
) -> Result<TensorRef> {
    let (n, d) = {
        let t = g.value(queries);
        (t.rows(), t.cols())
    };
    let m = g.value(keys).rows();
    if g.value(keys).cols() != d || g.value(values).cols() != d || g.value(values).rows() != m {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "queries [{} x {}], keys {:?}, values {:?}",
                n,
                d,
                g.value(keys).shape(),
                g.value(values).shape()
            ),
        ));
    }
    if d % n_heads != 0 {
        return Err(Error::shape(
            "multi_head_attention",
            format!("feature dim {} not divisible by {} heads", d, n_heads),
        ));
    }
    if mask.len() != n * m {
        return Err(Error::shape(
            "multi_head_attention",
            format!("mask has {} entries, expected {}", mask.len(), n * m),
        ));
    }
    for i in 0..n {
        if !mask[i * m..(i + 1) * m].iter().any(|&a| a) {
            return Err(Error::Contract(format!(
                "attention row {} has every position masked",
                i
            )));
        }
    }
    let q = g.matmul(queries, p.wq)?;
    let q = g.add(q, p.bq)?;
    let k = g.matmul(keys, p.wk)?;
    let v = g.matmul(values, p.wv)?;
    let v = g.add(v, p.bv)?;
    let add_mask = Model::additive_mask(g, mask, n, m)?;
    let core = attention_core(g, q, k, v, add_mask, n_heads)?;
    let out = g.matmul(core, p.wo)?;
    g.add(out, p.bo)
}
