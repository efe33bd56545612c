//! Output layers mapping final hidden states `h` to vocabulary distributions.
//!
//! The quantized head keeps a codebook `C` of `K` vectors and a fixed
//! token-to-code mapping `M`. Codebook logits `L_c = h·Cᵀ` are expanded to
//! vocabulary logits by `L_v[:, i] = L_c[:, M(i)]` before the softmax.
//!
//! Two loss paths ship for it. The naive path materializes `L_v` and runs an
//! ordinary cross-entropy; it is the reference and the source of
//! probabilities. The fused path never builds `L_v`: since token `i` only
//! sees the logit of its code, the vocabulary partition function is
//! `Z = Σ_j counts[j]·exp(L_c[j])`, so the loss costs `O(K)` per row.

use serde::{Deserialize, Serialize};

use crate::numerics::{logsumexp, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SeedStream;
use crate::{bail, Result};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut SeedStream) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.normal(0.0, std))).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Token-to-code assignment `M` with per-code member counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMapping {
    codes: Vec<usize>,
    counts: Vec<usize>,
}

impl VocabMapping {
    pub fn new(codes: Vec<usize>, num_codes: usize) -> Result<Self> {
        if num_codes == 0 {
            bail!(Config, "codebook must have at least one code");
        }
        let mut counts = vec![0; num_codes];
        for (i, &c) in codes.iter().enumerate() {
            if c >= num_codes {
                bail!(Index, "token {i} mapped to code {c} but K = {num_codes}");
            }
            counts[c] += 1;
        }
        Ok(Self { codes, counts })
    }

    pub fn identity(vocab: usize) -> Self {
        Self::new((0..vocab).collect(), vocab).expect("identity mapping is valid")
    }

    pub fn single_code(vocab: usize) -> Self {
        Self::new(vec![0; vocab], 1).expect("single-code mapping is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.codes.len()
    }

    pub fn num_codes(&self) -> usize {
        self.counts.len()
    }

    pub fn code(&self, token: usize) -> usize {
        self.codes[token]
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn members(&self, code: usize) -> impl Iterator<Item = usize> + '_ {
        self.codes
            .iter()
            .enumerate()
            .filter(move |&(_, &c)| c == code)
            .map(|(i, _)| i)
    }

    pub fn empty_codes(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }
}

/// `L = h · W_out` with the output matrix stored as `E_out = W_outᵀ`
/// (`V × d_model`, one row per token).
pub fn full_logits<T: Float>(tape: &mut Tape<T>, out_emb: Var, h: Var) -> Result<Var> {
    tape.matmul_nt(h, out_emb)
}

/// `L_c = h · Cᵀ` for `C: K × d_model`.
pub fn codebook_logits<T: Float>(tape: &mut Tape<T>, codebook: Var, h: Var) -> Result<Var> {
    tape.matmul_nt(h, codebook)
}

/// `L_v[:, i] = L_c[:, M(i)]`.
pub fn scatter_logits<T: Float>(tape: &mut Tape<T>, code_logits: Var, map: &VocabMapping) -> Result<Var> {
    if tape.value(code_logits).dims2().1 != map.num_codes() {
        bail!(
            Dimension,
            "codebook logits have {} columns, mapping expects K = {}",
            tape.value(code_logits).dims2().1,
            map.num_codes()
        );
    }
    tape.gather_columns(code_logits, map.codes())
}

/// Mean vocabulary cross-entropy of the quantized head, evaluated on the
/// `K`-wide codebook logits only.
pub fn vq_loss_fused<T: Float>(
    tape: &mut Tape<T>,
    codebook: Var,
    map: &VocabMapping,
    h: Var,
    targets: &[usize],
) -> Result<Var> {
    let lc = codebook_logits(tape, codebook, h)?;
    let codes = target_codes(map, targets)?;
    let scale = T::one() / T::from_usize(targets.len().max(1)).unwrap();
    tape.vq_cross_entropy_scaled(lc, map.counts(), &codes, scale)
}

/// Reference path: scatter to `V` columns, then ordinary cross-entropy.
pub fn vq_loss_naive<T: Float>(
    tape: &mut Tape<T>,
    codebook: Var,
    map: &VocabMapping,
    h: Var,
    targets: &[usize],
) -> Result<Var> {
    let lc = codebook_logits(tape, codebook, h)?;
    let lv = scatter_logits(tape, lc, map)?;
    tape.cross_entropy(lv, targets)
}

/// `P = softmax(L_v)` over the full vocabulary.
pub fn vq_probabilities<T: Float>(
    tape: &mut Tape<T>,
    codebook: Var,
    map: &VocabMapping,
    h: Var,
) -> Result<Var> {
    let lc = codebook_logits(tape, codebook, h)?;
    let lv = scatter_logits(tape, lc, map)?;
    tape.softmax(lv)
}

fn target_codes(map: &VocabMapping, targets: &[usize]) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t >= map.vocab_size() {
                bail!(Index, "target {t} out of range for V = {}", map.vocab_size());
            }
            Ok(map.code(t))
        })
        .collect()
}

/// `(h · W1) · W2`, associated left to right.
pub fn lowrank_logits<T: Float>(tape: &mut Tape<T>, w1: Var, w2: Var, h: Var) -> Result<Var> {
    let z = tape.matmul(h, w1)?;
    tape.matmul(z, w2)
}

/// Frequency-partitioned softmax: a shortlist over the most frequent tokens
/// plus one gate per tail cluster; each tail predicts its members through a
/// down-projection of width `d_model / factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveHead {
    pub cutoffs: Vec<usize>,
    pub tail_factors: Vec<usize>,
    pub shortlist: ParamId,
    pub tails: Vec<(ParamId, ParamId)>,
}

fn validate_adaptive(cutoffs: &[usize], factors: &[usize], d_model: usize, vocab: usize) -> Result<()> {
    if cutoffs.is_empty() || *cutoffs.last().unwrap() != vocab {
        bail!(Config, "adaptive cutoffs {cutoffs:?} must end at V = {vocab}");
    }
    if cutoffs[0] == 0 || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Config, "adaptive cutoffs {cutoffs:?} must be strictly ascending and positive");
    }
    if factors.len() + 1 != cutoffs.len() {
        bail!(
            Config,
            "{} tail clusters need {} projection factors, got {}",
            cutoffs.len() - 1,
            cutoffs.len() - 1,
            factors.len()
        );
    }
    if let Some(&f) = factors.iter().find(|&&f| f == 0 || f > d_model) {
        bail!(Config, "projection factor {f} must be in 1..={d_model}");
    }
    Ok(())
}

impl AdaptiveHead {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        d_model: usize,
        vocab: usize,
        cutoffs: &[usize],
        tail_factors: &[usize],
        rng: &mut SeedStream,
    ) -> Result<Self> {
        validate_adaptive(cutoffs, tail_factors, d_model, vocab)?;
        let n_tail = cutoffs.len() - 1;
        let shortlist = store.add(
            "head.shortlist",
            normal_tensor(&[d_model, cutoffs[0] + n_tail], INIT_STD, rng),
            true,
        );
        let mut tails = Vec::with_capacity(n_tail);
        for (c, &f) in tail_factors.iter().enumerate() {
            let inner = d_model / f;
            let size = cutoffs[c + 1] - cutoffs[c];
            let down = store.add(
                format!("head.tail{c}.down"),
                normal_tensor(&[d_model, inner], INIT_STD, rng),
                true,
            );
            let out = store.add(
                format!("head.tail{c}.out"),
                normal_tensor(&[inner, size], INIT_STD, rng),
                true,
            );
            tails.push((down, out));
        }
        Ok(Self {
            cutoffs: cutoffs.to_vec(),
            tail_factors: tail_factors.to_vec(),
            shortlist,
            tails,
        })
    }

    fn cluster_of(&self, token: usize) -> usize {
        self.cutoffs.partition_point(|&c| c <= token)
    }

    pub fn param_count(d_model: usize, cutoffs: &[usize], tail_factors: &[usize]) -> usize {
        let n_tail = cutoffs.len() - 1;
        let mut total = d_model * (cutoffs[0] + n_tail);
        for (c, &f) in tail_factors.iter().enumerate() {
            let inner = d_model / f;
            total += d_model * inner + inner * (cutoffs[c + 1] - cutoffs[c]);
        }
        total
    }
}

/// Exact mean negative log-likelihood under the adaptive factorization.
pub fn adaptive_loss<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &AdaptiveHead,
    h: Var,
    targets: &[usize],
) -> Result<Var> {
    let vocab = *head.cutoffs.last().unwrap();
    let c0 = head.cutoffs[0];
    let scale = T::one() / T::from_usize(targets.len().max(1)).unwrap();
    let mut head_targets = Vec::with_capacity(targets.len());
    let mut tail_rows: Vec<Vec<usize>> = vec![Vec::new(); head.tails.len()];
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            bail!(Index, "target {t} out of range for V = {vocab}");
        }
        let c = head.cluster_of(t);
        if c == 0 {
            head_targets.push(t);
        } else {
            head_targets.push(c0 + c - 1);
            tail_rows[c - 1].push(r);
        }
    }
    let w = tape.param(store, head.shortlist);
    let logits = tape.matmul(h, w)?;
    let mut loss = tape.cross_entropy_scaled(logits, &head_targets, scale)?;
    for (c, rows) in tail_rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let (down, out) = head.tails[c];
        let (down, out) = (tape.param(store, down), tape.param(store, out));
        let hs = tape.gather_rows(h, rows)?;
        let z = tape.matmul(hs, down)?;
        let tl = tape.matmul(z, out)?;
        let offset = head.cutoffs[c];
        let local: Vec<usize> = rows.iter().map(|&r| targets[r] - offset).collect();
        let tail_loss = tape.cross_entropy_scaled(tl, &local, scale)?;
        loss = tape.add(loss, tail_loss)?;
    }
    Ok(loss)
}

/// Full `m × V` log-probability table of the adaptive head.
pub fn adaptive_log_probs<T: Float>(
    store: &ParamStore<T>,
    head: &AdaptiveHead,
    h: &Tensor<T>,
) -> Result<Tensor<T>> {
    let vocab = *head.cutoffs.last().unwrap();
    let c0 = head.cutoffs[0];
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone(), false);
    let w = tape.param(store, head.shortlist);
    let hl = tape.matmul(hv, w)?;
    let mut tails = Vec::new();
    for &(down, out) in &head.tails {
        let (down, out) = (tape.param(store, down), tape.param(store, out));
        let z = tape.matmul(hv, down)?;
        tails.push(tape.matmul(z, out)?);
    }
    let (m, _) = tape.value(hv).dims2();
    let mut out = vec![T::zero(); m * vocab];
    for r in 0..m {
        let head_row = tape.value(hl).row(r);
        let lse = logsumexp(head_row);
        let dst = &mut out[r * vocab..(r + 1) * vocab];
        for i in 0..c0 {
            dst[i] = head_row[i] - lse;
        }
        for (c, &tv) in tails.iter().enumerate() {
            let gate = head_row[c0 + c] - lse;
            let row = tape.value(tv).row(r);
            let tl = logsumexp(row);
            for (j, &x) in row.iter().enumerate() {
                dst[head.cutoffs[c] + j] = gate + x - tl;
            }
        }
    }
    Tensor::new(&[m, vocab], out)
}

/// Serializable description of an output head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    Full,
    Vq {
        k: usize,
        codebook_trainable: bool,
    },
    Lowrank {
        rank: usize,
    },
    Adaptive {
        cutoffs: Vec<usize>,
        tail_factors: Vec<usize>,
    },
}

impl HeadSpec {
    pub fn name(&self) -> &'static str {
        match self {
            HeadSpec::Full => "full",
            HeadSpec::Vq { .. } => "vq",
            HeadSpec::Lowrank { .. } => "lowrank",
            HeadSpec::Adaptive { .. } => "adaptive",
        }
    }

    /// Cutoffs scaled from the `[20k, 80k, V]` split of a 267k vocabulary,
    /// with tail factors `[2, 4]`.
    pub fn default_adaptive(vocab: usize) -> Self {
        let c1 = (vocab * 20_000 / 267_735).max(1);
        let c2 = (vocab * 80_000 / 267_735).max(c1 + 1);
        HeadSpec::Adaptive {
            cutoffs: vec![c1, c2, vocab],
            tail_factors: vec![2, 4],
        }
    }
}

/// Number of learnable output-layer scalars (the VQ mapping is integer data
/// and reported separately).
pub fn head_param_count(spec: &HeadSpec, d_model: usize, vocab: usize) -> usize {
    match spec {
        HeadSpec::Full => d_model * vocab,
        HeadSpec::Vq { k, .. } => d_model * k,
        HeadSpec::Lowrank { rank } => d_model * rank + rank * vocab,
        HeadSpec::Adaptive {
            cutoffs,
            tail_factors,
        } => AdaptiveHead::param_count(d_model, cutoffs, tail_factors),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqHead {
    pub codebook: ParamId,
    pub mapping: VocabMapping,
    pub codebook_trainable: bool,
}

/// Output layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum OutputHead {
    /// Output embeddings `E_out` (`V × d_model`).
    Full { out_emb: ParamId },
    Vq(VqHead),
    LowRank { w1: ParamId, w2: ParamId },
    Adaptive(AdaptiveHead),
}

/// How the quantized loss is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VqLossPath {
    #[default]
    Fused,
    Naive,
}

impl OutputHead {
    /// Registers freshly initialized head parameters in `store`.
    pub fn build<T: Float>(
        spec: &HeadSpec,
        store: &mut ParamStore<T>,
        d_model: usize,
        vocab: usize,
        mapping: Option<VocabMapping>,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        Ok(match spec {
            HeadSpec::Full => OutputHead::Full {
                out_emb: store.add("head.out_emb", normal_tensor(&[vocab, d_model], INIT_STD, rng), true),
            },
            HeadSpec::Vq {
                k,
                codebook_trainable,
            } => {
                let mapping = match mapping {
                    Some(m) => m,
                    None => bail!(Config, "quantized head needs a vocabulary mapping"),
                };
                if mapping.num_codes() != *k || mapping.vocab_size() != vocab {
                    bail!(
                        Config,
                        "mapping is V={} K={}, head expects V={vocab} K={k}",
                        mapping.vocab_size(),
                        mapping.num_codes()
                    );
                }
                let codebook = store.add("head.codebook", normal_tensor(&[*k, d_model], INIT_STD, rng), true);
                store.get_mut(codebook).trainable = *codebook_trainable;
                OutputHead::Vq(VqHead {
                    codebook,
                    mapping,
                    codebook_trainable: *codebook_trainable,
                })
            }
            HeadSpec::Lowrank { rank } => {
                if *rank == 0 || *rank > d_model.min(vocab) {
                    bail!(Config, "rank {rank} must be in 1..=min(d_model, V)");
                }
                OutputHead::LowRank {
                    w1: store.add("head.w1", normal_tensor(&[d_model, *rank], INIT_STD, rng), true),
                    w2: store.add("head.w2", normal_tensor(&[*rank, vocab], INIT_STD, rng), true),
                }
            }
            HeadSpec::Adaptive {
                cutoffs,
                tail_factors,
            } => OutputHead::Adaptive(AdaptiveHead::new(store, d_model, vocab, cutoffs, tail_factors, rng)?),
        })
    }

    pub fn spec<T: Float>(&self, store: &ParamStore<T>) -> HeadSpec {
        match self {
            OutputHead::Full { .. } => HeadSpec::Full,
            OutputHead::Vq(v) => HeadSpec::Vq {
                k: v.mapping.num_codes(),
                codebook_trainable: v.codebook_trainable,
            },
            OutputHead::LowRank { w1, .. } => HeadSpec::Lowrank {
                rank: store.value(*w1).dims2().1,
            },
            OutputHead::Adaptive(a) => HeadSpec::Adaptive {
                cutoffs: a.cutoffs.clone(),
                tail_factors: a.tail_factors.clone(),
            },
        }
    }

    pub fn mapping(&self) -> Option<&VocabMapping> {
        match self {
            OutputHead::Vq(v) => Some(&v.mapping),
            _ => None,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            OutputHead::Full { out_emb } => vec![*out_emb],
            OutputHead::Vq(v) => vec![v.codebook],
            OutputHead::LowRank { w1, w2 } => vec![*w1, *w2],
            OutputHead::Adaptive(a) => {
                let mut ids = vec![a.shortlist];
                for &(d, o) in &a.tails {
                    ids.extend([d, o]);
                }
                ids
            }
        }
    }

    /// Mean cross-entropy of `targets` given hidden rows `h`.
    pub fn loss<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        targets: &[usize],
        path: VqLossPath,
    ) -> Result<Var> {
        match self {
            OutputHead::Full { out_emb } => {
                let w = tape.param(store, *out_emb);
                let l = full_logits(tape, w, h)?;
                tape.cross_entropy(l, targets)
            }
            OutputHead::Vq(v) => {
                let c = tape.param(store, v.codebook);
                match path {
                    VqLossPath::Fused => vq_loss_fused(tape, c, &v.mapping, h, targets),
                    VqLossPath::Naive => vq_loss_naive(tape, c, &v.mapping, h, targets),
                }
            }
            OutputHead::LowRank { w1, w2 } => {
                let (a, b) = (tape.param(store, *w1), tape.param(store, *w2));
                let l = lowrank_logits(tape, a, b, h)?;
                tape.cross_entropy(l, targets)
            }
            OutputHead::Adaptive(a) => adaptive_loss(tape, store, a, h, targets),
        }
    }

    /// Full-vocabulary scores whose row softmax is the model distribution
    /// (the adaptive head returns normalized log-probabilities).
    pub fn logits<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        match self {
            OutputHead::Full { out_emb } => {
                let w = tape.param(store, *out_emb);
                full_logits(tape, w, h)
            }
            OutputHead::Vq(v) => {
                let c = tape.param(store, v.codebook);
                let lc = codebook_logits(tape, c, h)?;
                scatter_logits(tape, lc, &v.mapping)
            }
            OutputHead::LowRank { w1, w2 } => {
                let (a, b) = (tape.param(store, *w1), tape.param(store, *w2));
                lowrank_logits(tape, a, b, h)
            }
            OutputHead::Adaptive(a) => {
                let lp = adaptive_log_probs(store, a, tape.value(h))?;
                Ok(tape.leaf(lp, false))
            }
        }
    }
}

#[cfg(test)]
mod tests;
