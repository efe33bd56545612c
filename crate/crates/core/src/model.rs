//! Pre-norm Transformer decoder producing the final hidden states `h`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::heads::{normal_tensor, HeadSpec, OutputHead, VocabMapping, VqLossPath, INIT_STD};
use crate::numerics::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SeedStream;
use crate::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    #[default]
    Untied,
    TieFull,
    TieCodebook,
}

impl std::str::FromStr for TieMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "untied" => TieMode::Untied,
            "tie_full" => TieMode::TieFull,
            "tie_codebook" => TieMode::TieCodebook,
            other => bail!(Config, "unknown tie mode {other:?}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub dropout: f64,
    pub tie_mode: TieMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            d_ffn: 512,
            n_heads: 4,
            vocab_size: 10_000,
            max_seq: 128,
            dropout: 0.1,
            tie_mode: TieMode::Untied,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads);
        }
        if self.d_ffn < self.d_model {
            bail!(Config, "d_ffn {} must be at least d_model {}", self.d_ffn, self.d_model);
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            bail!(Config, "vocab_size and max_seq must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} must be in [0, 1)", self.dropout);
        }
        Ok(())
    }
}

/// Where input-token embeddings come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputEmbedding {
    /// A dedicated `V × d_model` table.
    Own(ParamId),
    /// The Full head's `E_out`, shared.
    SharedFull(ParamId),
    /// Row `M(i)` of the codebook.
    Codebook(ParamId),
}

/// Decides the input embedding wiring for `cfg.tie_mode`, registering a
/// fresh table in `store` when untied.
pub fn resolve_tying<T: Float>(
    cfg: &ModelConfig,
    head: &OutputHead,
    store: &mut ParamStore<T>,
    rng: &mut SeedStream,
) -> Result<InputEmbedding> {
    match (cfg.tie_mode, head) {
        (TieMode::Untied, _) => Ok(InputEmbedding::Own(store.add(
            "tok_emb",
            normal_tensor(&[cfg.vocab_size, cfg.d_model], INIT_STD, rng),
            false,
        ))),
        (TieMode::TieFull, OutputHead::Full { out_emb }) => Ok(InputEmbedding::SharedFull(*out_emb)),
        (TieMode::TieCodebook, OutputHead::Vq(v)) => Ok(InputEmbedding::Codebook(v.codebook)),
        (TieMode::TieFull, _) => bail!(Config, "tie_full requires a full output head"),
        (TieMode::TieCodebook, _) => bail!(Config, "tie_codebook requires a quantized output head"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub w_qkv: ParamId,
    /// Query and value biases. Keys carry none: a key bias adds the same
    /// amount to every score in a row and cancels in the softmax.
    pub b_q: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2: (ParamId, ParamId),
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBody {
    pub input: InputEmbedding,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: (ParamId, ParamId),
}

fn layer_norm_params<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{prefix}.gamma"), Tensor::new(&[d], vec![T::one(); d]).unwrap(), false);
    let b = store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]), false);
    (g, b)
}

fn linear<T: Float>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeedStream,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{prefix}.weight"), normal_tensor(&[fan_in, fan_out], INIT_STD, rng), true);
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), false);
    (w, b)
}

impl TransformerBody {
    fn build<T: Float>(cfg: &ModelConfig, input: InputEmbedding, store: &mut ParamStore<T>, rng: &mut SeedStream) -> Self {
        let d = cfg.d_model;
        let pos_emb = store.add("pos_emb", normal_tensor(&[cfg.max_seq, d], INIT_STD, rng), false);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                let ln1 = layer_norm_params(store, &format!("{p}.ln1"), d);
                let w_qkv = store.add(
                    format!("{p}.attn.qkv.weight"),
                    normal_tensor(&[d, 3 * d], INIT_STD, rng),
                    true,
                );
                let b_q = store.add(format!("{p}.attn.q.bias"), Tensor::zeros(&[d]), false);
                let b_v = store.add(format!("{p}.attn.v.bias"), Tensor::zeros(&[d]), false);
                let (w_o, b_o) = linear(store, &format!("{p}.attn.out"), d, d, rng);
                let ln2 = layer_norm_params(store, &format!("{p}.ln2"), d);
                let (w_fc, b_fc) = linear(store, &format!("{p}.ffn.fc"), d, cfg.d_ffn, rng);
                let (w_proj, b_proj) = linear(store, &format!("{p}.ffn.proj"), cfg.d_ffn, d, rng);
                Block {
                    ln1,
                    w_qkv,
                    b_q,
                    b_v,
                    w_o,
                    b_o,
                    ln2,
                    w_fc,
                    b_fc,
                    w_proj,
                    b_proj,
                }
            })
            .collect();
        let ln_f = layer_norm_params(store, "ln_f", d);
        Self {
            input,
            pos_emb,
            blocks,
            ln_f,
        }
    }
}

/// Transformer body plus output head, with all parameters in one store.
#[derive(Clone, Debug)]
pub struct LanguageModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub body: TransformerBody,
    pub head: OutputHead,
}

impl<T: Float> LanguageModel<T> {
    /// Builds a freshly initialized model. `mapping` is required for a
    /// quantized head.
    pub fn new(config: ModelConfig, head: &HeadSpec, mapping: Option<VocabMapping>, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeedStream::new(seed);
        let mut params = ParamStore::new();
        let head = OutputHead::build(
            head,
            &mut params,
            config.d_model,
            config.vocab_size,
            mapping,
            &mut root.child("head"),
        )?;
        let mut body_rng = root.child("body");
        let input = resolve_tying(&config, &head, &mut params, &mut body_rng)?;
        let body = TransformerBody::build(&config, input, &mut params, &mut body_rng);
        Ok(Self {
            config,
            params,
            body,
            head,
        })
    }

    pub fn head_spec(&self) -> HeadSpec {
        self.head.spec(&self.params)
    }

    /// Parameters of the body, the input table included when it is not
    /// shared with the head.
    pub fn body_param_ids(&self) -> Vec<ParamId> {
        let head = self.head.param_ids();
        self.params.ids().filter(|id| !head.contains(id)).collect()
    }

    /// `h` as a `(batch·seq) × d_model` matrix. Dropout is active iff `rng`
    /// is given.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        mut rng: Option<&mut SeedStream>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if ids.len() != batch * seq {
            bail!(Dimension, "{} ids for a {batch}×{seq} batch", ids.len());
        }
        if seq > cfg.max_seq {
            bail!(Dimension, "sequence length {seq} exceeds max_seq {}", cfg.max_seq);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            bail!(Index, "token id {bad} out of range for V = {}", cfg.vocab_size);
        }
        let p = cfg.dropout;
        let tok = match self.body.input {
            InputEmbedding::Own(id) | InputEmbedding::SharedFull(id) => {
                let table = tape.param(&self.params, id);
                tape.embedding(table, ids)?
            }
            InputEmbedding::Codebook(id) => {
                let map = self.head.mapping().expect("codebook tying implies a quantized head");
                let codes: Vec<usize> = ids.iter().map(|&i| map.code(i)).collect();
                let table = tape.param(&self.params, id);
                tape.embedding(table, &codes)?
            }
        };
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos_table = tape.param(&self.params, self.body.pos_emb);
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, p, r)?;
        }
        for b in &self.body.blocks {
            let a = self.layer_norm(tape, x, b.ln1)?;
            let qkv = self.qkv(tape, a, b)?;
            let att_p = if rng.is_some() { p } else { 0.0 };
            let att = tape.causal_attention(qkv, batch, seq, cfg.n_heads, att_p, rng.as_deref_mut())?;
            let o = self.linear(tape, att, b.w_o, b.b_o)?;
            x = tape.add(x, o)?;
            let f = self.layer_norm(tape, x, b.ln2)?;
            let u = self.linear(tape, f, b.w_fc, b.b_fc)?;
            let u = tape.gelu(u)?;
            let mut v = self.linear(tape, u, b.w_proj, b.b_proj)?;
            if let Some(r) = rng.as_deref_mut() {
                v = tape.dropout(v, p, r)?;
            }
            x = tape.add(x, v)?;
        }
        self.layer_norm(tape, x, self.body.ln_f)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (tape.param(&self.params, g), tape.param(&self.params, b));
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn qkv(&self, tape: &mut Tape<T>, x: Var, b: &Block) -> Result<Var> {
        let d = self.config.d_model;
        let w = tape.param(&self.params, b.w_qkv);
        let y = tape.matmul(x, w)?;
        let bq = tape.param(&self.params, b.b_q);
        let bq = tape.reshape(bq, &[1, d])?;
        let bv = tape.param(&self.params, b.b_v);
        let bv = tape.reshape(bv, &[1, d])?;
        let zero = tape.leaf(Tensor::zeros(&[1, d]), false);
        let bias = tape.concat_cols(&[bq, zero, bv])?;
        let bias = tape.reshape(bias, &[3 * d])?;
        tape.add_bias(y, bias)
    }

    /// Mean next-token cross-entropy on `batch`.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch, rng: Option<&mut SeedStream>, path: VqLossPath) -> Result<Var> {
        let h = self.forward(tape, &batch.inputs, batch.batch, batch.seq, rng)?;
        self.head.loss(tape, &self.params, h, &batch.targets, path)
    }

    /// Eval-mode hidden states.
    pub fn hidden(&self, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, ids, batch, seq, None)?;
        Ok(tape.value(h).clone())
    }

    /// Copies every parameter whose name and shape match one in `other`,
    /// returning how many were copied.
    pub fn copy_matching_params(&mut self, other: &LanguageModel<T>) -> usize {
        let mut copied = 0;
        for src in other.params.iter() {
            if let Some(id) = self.params.find(&src.name) {
                if self.params.set_value(id, src.value.clone()).is_ok() {
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Float>(&self) -> LanguageModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let id = params.add(p.name.clone(), p.value.cast::<U>(), p.decay);
            params.get_mut(id).trainable = p.trainable;
        }
        LanguageModel {
            config: self.config.clone(),
            params,
            body: self.body.clone(),
            head: self.head.clone(),
        }
    }
}
