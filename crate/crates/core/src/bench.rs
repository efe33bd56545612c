//! Cost accounting and wall-clock timing of logit computation.
//!
//! FLOPs count a multiply-add as two operations. Latencies are medians over
//! repetitions after [`WARMUP_RUNS`] discarded runs; absolute values depend
//! on the machine, ratios within one session are what the reports compare.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::heads::{head_param_count, HeadSpec};
use crate::numerics::gemm;
use crate::rng::SeedStream;
use crate::{bail, Error, Result};

pub const WARMUP_RUNS: usize = 3;
pub const MIN_REPETITIONS: usize = 5;
pub const REPORT_HEADER: &str =
    "head,V,K_or_rank,d_model,B,S,params,weight_bytes,mapping_bytes,flops,lat_ms_median,lat_ms_p10,lat_ms_p90,speedup,ppl";

/// Rows of hidden states pushed through a head at once while timing. Keeps
/// the `rows × V` logit buffer small enough for desk memory.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp16,
    Fp32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(Precision::Fp16),
            "fp32" => Ok(Precision::Fp32),
            other => bail!(Config, "unknown precision '{other}' (fp16 or fp32)"),
        }
    }
}

/// Logit FLOPs for `batch × seq` positions. The VQ scatter is a copy and
/// counts zero; see [`scatter_moves`].
pub fn flops_logits(head: &HeadSpec, batch: usize, seq: usize, d_model: usize, vocab: usize) -> u64 {
    let m = (batch * seq) as u64;
    let (d, v) = (d_model as u64, vocab as u64);
    match head {
        HeadSpec::Full => 2 * m * d * v,
        HeadSpec::Vq { k, .. } => 2 * m * d * *k as u64,
        HeadSpec::Lowrank { rank } => 2 * m * *rank as u64 * (d + v),
        HeadSpec::Adaptive {
            cutoffs,
            tail_factors,
        } => {
            let n_tail = (cutoffs.len() - 1) as u64;
            let mut f = 2 * m * d * (cutoffs[0] as u64 + n_tail);
            for (c, &fac) in tail_factors.iter().enumerate() {
                let inner = (d_model / fac) as u64;
                let size = (cutoffs[c + 1] - cutoffs[c]) as u64;
                f += 2 * m * inner * (d + size);
            }
            f
        }
    }
}

/// Element copies performed by the VQ scatter.
pub fn scatter_moves(batch: usize, seq: usize, vocab: usize) -> u64 {
    (batch * seq) as u64 * vocab as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub params: usize,
    pub weight_bytes: usize,
    pub mapping_bytes: usize,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> usize {
        self.weight_bytes + self.mapping_bytes
    }
}

/// Output-layer storage: weights at `precision`, plus a 4-byte code per
/// token for quantized heads.
pub fn memory_report(head: &HeadSpec, d_model: usize, vocab: usize, precision: Precision) -> MemoryReport {
    let params = head_param_count(head, d_model, vocab);
    let mapping_bytes = match head {
        HeadSpec::Vq { .. } => vocab * 4,
        _ => 0,
    };
    MemoryReport {
        params,
        weight_bytes: params * precision.bytes(),
        mapping_bytes,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Timed repetitions in run order, warmups excluded.
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            bail!(Input, "no latency samples");
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            median_ms: quantile(&sorted, 0.5),
            p10_ms: quantile(&sorted, 0.1),
            p90_ms: quantile(&sorted, 0.9),
            samples_ms,
        })
    }
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Hidden states shared by every head timed under `seed`.
pub fn bench_hidden(rows: usize, d_model: usize, seed: u64) -> Vec<f32> {
    let mut rng = SeedStream::new(seed).child("bench.hidden");
    (0..rows * d_model).map(|_| rng.normal(0.0, 1.0) as f32).collect()
}

/// A head's raw logit computation on `f32` buffers.
enum Kernel {
    Full {
        out_emb: Vec<f32>,
    },
    Vq {
        codebook: Vec<f32>,
        codes: Vec<u32>,
        k: usize,
        code_logits: Vec<f32>,
    },
    LowRank {
        w1: Vec<f32>,
        w2: Vec<f32>,
        rank: usize,
        inner: Vec<f32>,
    },
    Adaptive {
        shortlist: Vec<f32>,
        head_width: usize,
        tails: Vec<(Vec<f32>, Vec<f32>, usize, usize)>,
        inner: Vec<f32>,
        tail_logits: Vec<f32>,
    },
}

impl Kernel {
    fn new(head: &HeadSpec, d: usize, vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = SeedStream::new(seed).child(&format!("bench.weights.{}", head.name()));
        let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.normal(0.0, 0.02) as f32).collect() };
        Ok(match head {
            HeadSpec::Full => Kernel::Full {
                out_emb: normal(vocab * d),
            },
            HeadSpec::Vq { k, .. } => {
                let k = *k;
                if k == 0 || k > vocab {
                    bail!(Config, "codebook size {k} must be in 1..={vocab}");
                }
                Kernel::Vq {
                    codebook: normal(k * d),
                    codes: (0..vocab).map(|i| (i * k / vocab) as u32).collect(),
                    k,
                    code_logits: vec![0.0; CHUNK_ROWS * k],
                }
            }
            HeadSpec::Lowrank { rank } => {
                if *rank == 0 {
                    bail!(Config, "rank must be positive");
                }
                Kernel::LowRank {
                    w1: normal(d * rank),
                    w2: normal(rank * vocab),
                    rank: *rank,
                    inner: vec![0.0; CHUNK_ROWS * rank],
                }
            }
            HeadSpec::Adaptive {
                cutoffs,
                tail_factors,
            } => {
                if cutoffs.last() != Some(&vocab) || tail_factors.len() + 1 != cutoffs.len() {
                    bail!(Config, "adaptive cutoffs {cutoffs:?} do not fit V = {vocab}");
                }
                let head_width = cutoffs[0] + tail_factors.len();
                let tails: Vec<_> = tail_factors
                    .iter()
                    .enumerate()
                    .map(|(c, &f)| {
                        let inner = (d / f).max(1);
                        let size = cutoffs[c + 1] - cutoffs[c];
                        (normal(d * inner), normal(inner * size), inner, size)
                    })
                    .collect();
                let max_inner = tails.iter().map(|t| t.2).max().unwrap_or(0);
                let max_size = tails.iter().map(|t| t.3).max().unwrap_or(0);
                Kernel::Adaptive {
                    shortlist: normal(d * head_width),
                    head_width,
                    tails,
                    inner: vec![0.0; CHUNK_ROWS * max_inner],
                    tail_logits: vec![0.0; CHUNK_ROWS * max_size],
                }
            }
        })
    }

    /// Writes the `rows × V` logits of `h` (`rows × d`) into `out`.
    fn run(&mut self, h: &[f32], rows: usize, d: usize, vocab: usize, out: &mut [f32]) {
        let out = &mut out[..rows * vocab];
        match self {
            Kernel::Full { out_emb } => gemm(rows, d, vocab, h, false, out_emb, true, out, false),
            Kernel::Vq {
                codebook,
                codes,
                k,
                code_logits,
            } => {
                grow(code_logits, rows * *k);
                let lc = &mut code_logits[..rows * *k];
                gemm(rows, d, *k, h, false, codebook, true, lc, false);
                for (dst, src) in out.chunks_exact_mut(vocab).zip(lc.chunks_exact(*k)) {
                    for (x, &c) in dst.iter_mut().zip(codes.iter()) {
                        *x = src[c as usize];
                    }
                }
            }
            Kernel::LowRank { w1, w2, rank, inner } => {
                grow(inner, rows * *rank);
                let t = &mut inner[..rows * *rank];
                gemm(rows, d, *rank, h, false, w1, false, t, false);
                gemm(rows, *rank, vocab, t, false, w2, false, out, false);
            }
            Kernel::Adaptive {
                shortlist,
                head_width,
                tails,
                inner,
                tail_logits,
            } => {
                gemm(rows, d, *head_width, h, false, shortlist, false, &mut out[..rows * *head_width], false);
                for (down, up, r, size) in tails.iter() {
                    grow(inner, rows * r);
                    grow(tail_logits, rows * size);
                    let t = &mut inner[..rows * r];
                    gemm(rows, d, *r, h, false, down, false, t, false);
                    gemm(rows, *r, *size, t, false, up, false, &mut tail_logits[..rows * size], false);
                }
            }
        }
    }
}

fn grow(buf: &mut Vec<f32>, len: usize) {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
}

/// Times the full-vocabulary logit computation for `batch × seq` positions.
///
/// The hidden states come from [`bench_hidden`] so every head timed with
/// the same seed sees the same input. VQ timings include the codebook
/// product and the scatter to `V` columns.
pub fn time_logits(
    head: &HeadSpec,
    vocab: usize,
    batch: usize,
    seq: usize,
    d_model: usize,
    repetitions: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if repetitions < MIN_REPETITIONS {
        bail!(Config, "need at least {MIN_REPETITIONS} timed repetitions, got {repetitions}");
    }
    if batch == 0 || seq == 0 || d_model == 0 || vocab == 0 {
        bail!(Config, "benchmark extents must be positive");
    }
    let rows = batch * seq;
    let h = bench_hidden(rows, d_model, seed);
    let mut kernel = Kernel::new(head, d_model, vocab, seed)?;
    let mut out = vec![0.0f32; CHUNK_ROWS.min(rows) * vocab];
    let mut samples = Vec::with_capacity(repetitions);
    for rep in 0..WARMUP_RUNS + repetitions {
        let start = Instant::now();
        for chunk in h.chunks(CHUNK_ROWS * d_model) {
            kernel.run(chunk, chunk.len() / d_model, d_model, vocab, &mut out);
        }
        std::hint::black_box(&out);
        if rep >= WARMUP_RUNS {
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyStats::from_samples(samples)
}

/// One row of the cost report.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub head: HeadSpec,
    pub vocab: usize,
    pub d_model: usize,
    pub batch: usize,
    pub seq: usize,
    pub params: usize,
    pub weight_bytes: usize,
    pub mapping_bytes: usize,
    pub flops: u64,
    pub latency: Option<LatencyStats>,
    pub speedup: Option<f64>,
    pub ppl: Option<f64>,
}

impl CostReport {
    /// Static columns for `head`; latency and PPL start empty.
    pub fn accounting(head: &HeadSpec, vocab: usize, d_model: usize, batch: usize, seq: usize, precision: Precision) -> Self {
        let mem = memory_report(head, d_model, vocab, precision);
        Self {
            head: head.clone(),
            vocab,
            d_model,
            batch,
            seq,
            params: mem.params,
            weight_bytes: mem.weight_bytes,
            mapping_bytes: mem.mapping_bytes,
            flops: flops_logits(head, batch, seq, d_model, vocab),
            latency: None,
            speedup: None,
            ppl: None,
        }
    }

    pub fn k_or_rank(&self) -> Option<usize> {
        match self.head {
            HeadSpec::Vq { k, .. } => Some(k),
            HeadSpec::Lowrank { rank } => Some(rank),
            _ => None,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let lat = self.latency.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.head.name(),
            self.vocab,
            self.k_or_rank().map(|k| k.to_string()).unwrap_or_default(),
            self.d_model,
            self.batch,
            self.seq,
            self.params,
            self.weight_bytes,
            self.mapping_bytes,
            self.flops,
            opt(lat.map(|l| l.median_ms)),
            opt(lat.map(|l| l.p10_ms)),
            opt(lat.map(|l| l.p90_ms)),
            opt(self.speedup),
            opt(self.ppl),
        )
    }
}

/// Full CSV text, header included.
pub fn report_csv(rows: &[CostReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// The CSV with the machine-dependent columns (latencies, speedup) blanked.
pub fn report_csv_static(rows: &[CostReport]) -> String {
    let stripped: Vec<CostReport> = rows
        .iter()
        .map(|r| CostReport {
            latency: None,
            speedup: None,
            ..r.clone()
        })
        .collect();
    report_csv(&stripped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HeadKind {
    Full,
    Vq,
    Lowrank,
    Adaptive,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HeadKind::Full),
            "vq" => Ok(HeadKind::Vq),
            "lowrank" => Ok(HeadKind::Lowrank),
            "adaptive" => Ok(HeadKind::Adaptive),
            other => bail!(Config, "unknown head '{other}'"),
        }
    }
}

/// Configurations to account for and time.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchGrid {
    pub heads: Vec<HeadKind>,
    /// Codebook sizes for VQ rows and inner ranks for low-rank rows.
    pub sizes: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    pub d_model: usize,
    pub batch: usize,
    pub seq: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub precision: Precision,
    /// When false only the static columns are filled.
    pub timing: bool,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            heads: vec![HeadKind::Full, HeadKind::Vq],
            sizes: vec![256, 1024, 4096],
            vocab_sizes: vec![32_768],
            d_model: 256,
            batch: 16,
            seq: 1024,
            repetitions: MIN_REPETITIONS,
            seed: 0,
            precision: Precision::Fp16,
            timing: true,
        }
    }
}

impl BenchGrid {
    /// Row specs in report order: per vocabulary size the full baseline
    /// first, then each requested head. Heads without a size parameter
    /// appear once per vocabulary size.
    pub fn rows(&self) -> Result<Vec<(usize, HeadSpec)>> {
        if self.heads.is_empty() || self.vocab_sizes.is_empty() {
            bail!(Config, "bench grid needs at least one head and one vocabulary size");
        }
        let sized = self.heads.iter().any(|h| matches!(h, HeadKind::Vq | HeadKind::Lowrank));
        if sized && self.sizes.is_empty() {
            bail!(Config, "vq and lowrank rows need at least one size");
        }
        let mut heads = self.heads.clone();
        heads.sort();
        heads.dedup();
        let mut out = Vec::new();
        for &v in &self.vocab_sizes {
            out.push((v, HeadSpec::Full));
            for kind in &heads {
                match kind {
                    HeadKind::Full => {}
                    HeadKind::Vq => {
                        for &k in &self.sizes {
                            if k == 0 || k > v {
                                bail!(Config, "codebook size {k} must be in 1..={v}");
                            }
                            out.push((v, HeadSpec::Vq { k, codebook_trainable: true }));
                        }
                    }
                    HeadKind::Lowrank => {
                        for &r in &self.sizes {
                            out.push((v, HeadSpec::Lowrank { rank: r }));
                        }
                    }
                    HeadKind::Adaptive => out.push((v, HeadSpec::default_adaptive(v))),
                }
            }
        }
        Ok(out)
    }
}

impl FromStr for BenchGrid {
    type Err = Error;

    /// `key=value` pairs separated by `;`, lists separated by `,`. Keys:
    /// `heads`, `sizes` (alias `K`), `V`, `d`, `B`, `S`, `reps`, `seed`,
    /// `precision`, `timing`. Omitted keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad value '{x}' for {key}"))))
                .collect()
        }
        fn one<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        let mut g = BenchGrid::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let Some((key, value)) = part.split_once('=') else {
                bail!(Config, "grid entry '{part}' is not key=value");
            };
            match key.trim() {
                "heads" => g.heads = value.split(',').map(|h| h.trim().parse()).collect::<Result<_>>()?,
                "sizes" | "K" => g.sizes = list(key, value)?,
                "V" => g.vocab_sizes = list(key, value)?,
                "d" => g.d_model = one(key, value)?,
                "B" => g.batch = one(key, value)?,
                "S" => g.seq = one(key, value)?,
                "reps" => g.repetitions = one(key, value)?,
                "seed" => g.seed = one(key, value)?,
                "precision" => g.precision = value.trim().parse()?,
                "timing" => g.timing = one(key, value)?,
                other => bail!(Config, "unknown grid key '{other}'"),
            }
        }
        Ok(g)
    }
}

/// Builds one report row per grid configuration. `ppl` supplies the
/// perplexity of a trained model for a `(V, head)` pair when one exists.
pub fn sweep_report(grid: &BenchGrid, ppl: &dyn Fn(usize, &HeadSpec) -> Option<f64>) -> Result<Vec<CostReport>> {
    let specs = grid.rows()?;
    let mut baseline: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rows = Vec::with_capacity(specs.len());
    for (v, spec) in specs {
        let mut row = CostReport::accounting(&spec, v, grid.d_model, grid.batch, grid.seq, grid.precision);
        if grid.timing {
            let stats = time_logits(&spec, v, grid.batch, grid.seq, grid.d_model, grid.repetitions, grid.seed)?;
            let size = row.k_or_rank().map(|k| format!(" K={k}")).unwrap_or_default();
            log::info!("{} V={v}{size}: median {:.3} ms", spec.name(), stats.median_ms);
            let full = *baseline.entry(v).or_insert(stats.median_ms);
            row.speedup = Some(if spec == HeadSpec::Full { 1.0 } else { full / stats.median_ms });
            row.latency = Some(stats);
        }
        row.ppl = ppl(v, &spec);
        rows.push(row);
    }
    Ok(rows)
}
