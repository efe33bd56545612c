//! Codebook construction and vocabulary-to-code mapping strategies.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::heads::{HeadSpec, OutputHead, VocabMapping};
use crate::model::{LanguageModel, TieMode};
use crate::numerics::{gemm, Float, Tensor};
use crate::rng::SeedStream;
use crate::{bail, Error, Result};

pub const DEFAULT_KMEANS_ITERS: usize = 20;
const REL_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Tensor<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after seeding, then after every iteration.
    pub distortion_history: Vec<f64>,
    pub iterations_run: usize,
}

impl KMeansResult {
    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().unwrap()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
    norms: Vec<f64>,
}

impl Points {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn norms(data: &[f64], d: usize) -> Vec<f64> {
    data.chunks(d).map(|r| r.iter().map(|x| x * x).sum()).collect()
}

/// Nearest centroid for every point, ties to the lowest index.
///
/// Candidates come from the expanded form `|x|² − 2x·c + |c|²` computed with
/// one GEMM; every candidate within rounding slack of the best is re-scored
/// with the direct squared difference, so the result equals an exhaustive
/// direct search.
fn assign(points: &Points, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, d) = (points.n, points.d);
    let c_norms = norms(centroids, d);
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    const CHUNK: usize = 256;
    let mut dots = vec![0.0; CHUNK * k];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let block = &points.data[start * d..(start + rows) * d];
        gemm(rows, d, k, block, false, centroids, true, &mut dots[..rows * k], false);
        for r in 0..rows {
            let i = start + r;
            let x_norm = points.norms[i];
            let approx: Vec<f64> = (0..k).map(|j| x_norm - 2.0 * dots[r * k + j] + c_norms[j]).collect();
            let best = approx.iter().cloned().fold(f64::INFINITY, f64::min);
            let scale = x_norm.max(c_norms.iter().cloned().fold(0.0, f64::max));
            let slack = 1e-9 * scale.max(1e-300) + 1e-12 * best.abs();
            let x = points.row(i);
            let mut arg = usize::MAX;
            let mut min = f64::INFINITY;
            for j in 0..k {
                if approx[j] <= best + slack {
                    let dist = sq_dist(x, &centroids[j * d..(j + 1) * d]);
                    if dist < min {
                        min = dist;
                        arg = j;
                    }
                }
            }
            assignments[i] = arg;
            dists[i] = min;
        }
    }
    (assignments, dists)
}

fn kmeans_pp(points: &Points, k: usize, rng: &mut SeedStream) -> Vec<f64> {
    let (n, d) = (points.n, points.d);
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.below(n);
    chosen[first] = true;
    centroids.extend_from_slice(points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just above the accumulated sum
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[pick] = true;
        let c = points.row(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding and squared Euclidean distance.
///
/// Stops after `max_iters` iterations or when the relative distortion
/// improvement falls below 1e-7. A centroid left without members is moved
/// to the point currently farthest from its own centroid.
pub fn kmeans<T: Float>(points: &Tensor<T>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_restarts(points, k, max_iters, 1, seed)
}

/// Best of `restarts` independent runs by final distortion (earliest run on
/// ties). The first run uses `seed` itself, so one restart equals
/// [`kmeans`].
pub fn kmeans_restarts<T: Float>(
    points: &Tensor<T>,
    k: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let (n, d) = points.dims2();
    if n == 0 || k == 0 {
        bail!(Config, "k-means needs at least one point and one cluster (V = {n}, K = {k})");
    }
    if k > n {
        bail!(Config, "K = {k} exceeds the number of points V = {n}");
    }
    if restarts == 0 {
        bail!(Config, "k-means needs at least one restart");
    }
    let data: Vec<f64> = points.data().iter().map(|x| x.as_f64()).collect();
    let pts = Points {
        norms: norms(&data, d),
        data,
        n,
        d,
    };
    let root = SeedStream::new(seed);
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let mut rng = if r == 0 { SeedStream::new(seed) } else { root.child(&format!("restart-{r}")) };
        let run = lloyd(&pts, k, max_iters, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.distortion() < b.distortion()) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(pts: &Points, k: usize, max_iters: usize, rng: &mut SeedStream) -> Result<KMeansResult> {
    let (n, d) = (pts.n, pts.d);
    let mut centroids = kmeans_pp(pts, k, rng);
    let (mut assignments, mut dists) = assign(pts, &centroids, k);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations_run = 0;
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums[j * d..(j + 1) * d].iter_mut().zip(pts.row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let count = counts[j] as f64;
                for (c, s) in centroids[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *c = s / count;
                }
            }
        }
        for i in 0..n {
            let j = assignments[i];
            dists[i] = sq_dist(pts.row(i), &centroids[j * d..(j + 1) * d]);
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[j * d..(j + 1) * d].copy_from_slice(pts.row(far));
                assignments[far] = j;
                dists[far] = 0.0;
            }
        }
        let (a, dd) = assign(pts, &centroids, k);
        assignments = a;
        dists = dd;
        let distortion: f64 = dists.iter().sum();
        let prev = *history.last().unwrap();
        history.push(distortion);
        iterations_run += 1;
        if prev - distortion <= REL_TOLERANCE * prev {
            break;
        }
    }
    Ok(KMeansResult {
        centroids: Tensor::new(&[k, d], centroids)?,
        assignments,
        distortion_history: history,
        iterations_run,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    KmeansOutput,
    KmeansInput,
    FreqBinning,
    ContiguousBlocks,
    Random,
}

impl FromStr for MappingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kmeans_output" => Self::KmeansOutput,
            "kmeans_input" => Self::KmeansInput,
            "freq_binning" => Self::FreqBinning,
            "contiguous_blocks" => Self::ContiguousBlocks,
            "random" => Self::Random,
            other => bail!(Config, "unknown mapping strategy {other:?}"),
        })
    }
}

/// Everything a mapping strategy may consume; unused fields may be `None`.
pub struct MappingInputs<'a, T> {
    pub vocab_size: usize,
    pub k: usize,
    pub freqs: Option<&'a [u64]>,
    pub output_embeddings: Option<&'a Tensor<T>>,
    pub input_embeddings: Option<&'a Tensor<T>>,
    pub kmeans_iters: usize,
    pub seed: u64,
}

/// Sizes `floor(V/K)` with the first `V mod K` bins one larger.
fn bin_codes(order: &[usize], k: usize) -> Vec<usize> {
    let v = order.len();
    let (base, extra) = (v / k, v % k);
    let mut codes = vec![0; v];
    let mut pos = 0;
    for j in 0..k {
        let size = base + usize::from(j < extra);
        for &i in &order[pos..pos + size] {
            codes[i] = j;
        }
        pos += size;
    }
    codes
}

pub fn init_mapping<T: Float>(strategy: MappingStrategy, inputs: &MappingInputs<'_, T>) -> Result<VocabMapping> {
    let (v, k) = (inputs.vocab_size, inputs.k);
    if k == 0 || k > v {
        bail!(Config, "K = {k} must be in 1..=V ({v})");
    }
    let from_embeddings = |emb: Option<&Tensor<T>>, what: &str| -> Result<VocabMapping> {
        let Some(emb) = emb else {
            bail!(Config, "{what} embeddings are required for this mapping strategy");
        };
        if emb.dims2().0 != v {
            bail!(Dimension, "{what} embeddings have {} rows, V = {v}", emb.dims2().0);
        }
        let km = kmeans(emb, k, inputs.kmeans_iters, inputs.seed)?;
        VocabMapping::new(km.assignments, k)
    };
    match strategy {
        MappingStrategy::KmeansOutput => from_embeddings(inputs.output_embeddings, "output"),
        MappingStrategy::KmeansInput => from_embeddings(inputs.input_embeddings, "input"),
        MappingStrategy::FreqBinning => {
            let Some(freqs) = inputs.freqs else {
                bail!(Config, "frequency binning needs token frequencies");
            };
            if freqs.len() != v {
                bail!(Dimension, "{} frequencies for V = {v}", freqs.len());
            }
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
            VocabMapping::new(bin_codes(&order, k), k)
        }
        MappingStrategy::ContiguousBlocks => {
            let order: Vec<usize> = (0..v).collect();
            VocabMapping::new(bin_codes(&order, k), k)
        }
        MappingStrategy::Random => {
            let mut rng = SeedStream::new(inputs.seed);
            VocabMapping::new((0..v).map(|_| rng.below(k)).collect(), k)
        }
    }
}

/// Per-code mean of `rows` under `mapping`; empty codes get zero vectors.
pub fn codebook_from_mapping<T: Float>(rows: &Tensor<T>, mapping: &VocabMapping) -> Result<Tensor<T>> {
    let (v, d) = rows.dims2();
    if v != mapping.vocab_size() {
        bail!(Dimension, "{v} embedding rows for a mapping over V = {}", mapping.vocab_size());
    }
    let k = mapping.num_codes();
    let mut sums = vec![0.0f64; k * d];
    for i in 0..v {
        let j = mapping.code(i);
        for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(rows.row(i)) {
            *s += x.as_f64();
        }
    }
    let data = sums
        .chunks(d)
        .zip(mapping.counts())
        .flat_map(|(s, &c)| s.iter().map(move |&x| if c == 0 { 0.0 } else { x / c as f64 }))
        .map(T::from_f64_lossy)
        .collect();
    Tensor::new(&[k, d], data)
}

/// Output embeddings `E_out` (one row per token) of a Full-head model.
pub fn output_embeddings<T: Float>(model: &LanguageModel<T>) -> Result<&Tensor<T>> {
    match &model.head {
        OutputHead::Full { out_emb } => Ok(model.params.value(*out_emb)),
        _ => bail!(Config, "model has a {} head; a full head is required", model.head_spec().name()),
    }
}

/// Input embedding table, whatever tying the model uses.
pub fn input_embeddings<T: Float>(model: &LanguageModel<T>) -> Tensor<T> {
    use crate::model::InputEmbedding;
    match model.body.input {
        InputEmbedding::Own(id) | InputEmbedding::SharedFull(id) => model.params.value(id).clone(),
        InputEmbedding::Codebook(id) => {
            let c = model.params.value(id);
            let map = model.head.mapping().expect("codebook tying implies a mapping");
            let d = c.dims2().1;
            let data = map.codes().iter().flat_map(|&j| c.row(j).to_vec()).collect();
            Tensor::new(&[map.vocab_size(), d], data).unwrap()
        }
    }
}

/// Replaces the Full head of `model` with a quantized head built from
/// `mapping` and codebook `codebook`, copying every body parameter.
///
/// A `tie_full` source becomes untied, its shared table copied into the new
/// input embeddings.
pub fn convert_to_vq<T: Float>(
    model: &LanguageModel<T>,
    codebook: Tensor<T>,
    mapping: VocabMapping,
    codebook_trainable: bool,
) -> Result<LanguageModel<T>> {
    let e_out = output_embeddings(model)?;
    let mut config = model.config.clone();
    if config.tie_mode == TieMode::TieFull {
        config.tie_mode = TieMode::Untied;
    }
    let spec = HeadSpec::Vq {
        k: mapping.num_codes(),
        codebook_trainable,
    };
    let mut vq = LanguageModel::new(config, &spec, Some(mapping), 0)?;
    vq.copy_matching_params(model);
    if model.config.tie_mode == TieMode::TieFull {
        let id = vq.params.find("tok_emb").expect("untied model has an input table");
        vq.params.set_value(id, e_out.clone())?;
    }
    let c = vq.head.param_ids()[0];
    vq.params.set_value(c, codebook)?;
    Ok(vq)
}

/// Option A: k-means over the output embeddings of a trained Full-head
/// model; centroids become `C`, assignments become `M`.
pub fn init_option_a<T: Float>(
    model: &LanguageModel<T>,
    k: usize,
    codebook_trainable: bool,
    max_iters: usize,
    seed: u64,
) -> Result<(LanguageModel<T>, KMeansResult)> {
    let e_out = output_embeddings(model)?;
    let km = kmeans(e_out, k, max_iters, seed)?;
    let mapping = VocabMapping::new(km.assignments.clone(), k)?;
    let codebook = km.centroids.cast::<T>();
    Ok((convert_to_vq(model, codebook, mapping, codebook_trainable)?, km))
}

/// Quantized model for any mapping strategy, with `C` initialized to the
/// per-code mean of the source model's output embeddings.
pub fn init_with_strategy<T: Float>(
    model: &LanguageModel<T>,
    strategy: MappingStrategy,
    k: usize,
    freqs: Option<&[u64]>,
    codebook_trainable: bool,
    seed: u64,
) -> Result<LanguageModel<T>> {
    let e_out = output_embeddings(model)?;
    let e_in = input_embeddings(model);
    let mapping = init_mapping(
        strategy,
        &MappingInputs {
            vocab_size: model.config.vocab_size,
            k,
            freqs,
            output_embeddings: Some(e_out),
            input_embeddings: Some(&e_in),
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            seed,
        },
    )?;
    let codebook = codebook_from_mapping(e_out, &mapping)?;
    convert_to_vq(model, codebook, mapping, codebook_trainable)
}

pub fn mapping_to_string(map: &VocabMapping) -> String {
    let mut s = format!("vqmap v1 V={} K={}\n", map.vocab_size(), map.num_codes());
    for &c in map.codes() {
        s.push_str(&c.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_mapping(text: &str) -> Result<VocabMapping> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let fields: Vec<&str> = header.split(' ').collect();
    let field = |prefix: &str, s: &str| -> Option<usize> { s.strip_prefix(prefix)?.parse().ok() };
    let (v, k) = match fields.as_slice() {
        ["vqmap", "v1", v, k] => match (field("V=", v), field("K=", k)) {
            (Some(v), Some(k)) => (v, k),
            _ => bail!(Format, "malformed mapping header {header:?}"),
        },
        _ => bail!(Format, "not a vqmap v1 file: {header:?}"),
    };
    let codes = lines
        .enumerate()
        .map(|(n, l)| {
            l.parse::<usize>()
                .map_err(|_| Error::Format(format!("line {}: bad code index {l:?}", n + 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    if codes.len() != v {
        bail!(Format, "header declares V={v} but {} codes follow", codes.len());
    }
    VocabMapping::new(codes, k)
}

pub fn save_mapping(map: &VocabMapping, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, mapping_to_string(map))?)
}

pub fn load_mapping(path: &Path) -> Result<VocabMapping> {
    parse_mapping(&std::fs::read_to_string(path)?)
}
