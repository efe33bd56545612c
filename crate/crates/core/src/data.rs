//! Word-level vocabulary and contiguous-lane batching.
//!
//! Ids `0..V-2` are ordinary tokens ranked by descending corpus frequency
//! (ties broken lexicographically); `V-2` is `<unk>` and `V-1` is `<eos>`.
//! A newline in the corpus becomes `<eos>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::rng::SeedStream;
use crate::{bail, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    freq: Vec<u64>,
}

/// Splits `text` into whitespace tokens, emitting [`EOS`] for each newline.
fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_inclusive('\n').flat_map(|line| {
        let eos = line.ends_with('\n').then_some(EOS);
        line.split_whitespace().chain(eos)
    })
}

impl Vocabulary {
    /// Builds a vocabulary of at most `max_size` ids (specials included).
    /// Tokens below `min_freq` or beyond the size budget map to `<unk>`.
    pub fn build(corpus: &str, max_size: usize, min_freq: u64) -> Result<Self> {
        if max_size < 3 {
            bail!(Config, "max_size must leave room for <unk>, <eos> and one token");
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut unk = 0u64;
        let mut eos = 0u64;
        let mut total = 0u64;
        for tok in tokens(corpus) {
            total += 1;
            match tok {
                UNK => unk += 1,
                EOS => eos += 1,
                t => *counts.entry(t).or_default() += 1,
            }
        }
        if total == 0 || total == eos {
            bail!(Input, "corpus contains no tokens");
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = Vec::new();
        let mut freq = Vec::new();
        for (i, &(tok, f)) in ranked.iter().enumerate() {
            if i < max_size - 2 && f >= min_freq {
                id_to_token.push(tok.to_string());
                freq.push(f);
            } else {
                unk += f;
            }
        }
        id_to_token.push(UNK.to_string());
        freq.push(unk);
        id_to_token.push(EOS.to_string());
        freq.push(eos);
        Ok(Self::from_parts(id_to_token, freq))
    }

    fn from_parts(id_to_token: Vec<String>, freq: Vec<u64>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
            freq,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.len() - 2
    }

    pub fn eos_id(&self) -> usize {
        self.len() - 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokens(text).map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            if id == self.eos_id() {
                out.push('\n');
                line_start = true;
                continue;
            }
            if !line_start {
                out.push(' ');
            }
            out.push_str(self.token(id));
            line_start = false;
        }
        out
    }

    /// `token<TAB>freq` per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (t, f) in self.id_to_token.iter().zip(&self.freq) {
            writeln!(s, "{t}\t{f}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut id_to_token = Vec::new();
        let mut freq = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let Some((tok, f)) = line.rsplit_once('\t') else {
                bail!(Format, "vocabulary line {} has no tab", n + 1);
            };
            let f: u64 = f
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad frequency on line {}", n + 1)))?;
            id_to_token.push(tok.to_string());
            freq.push(f);
        }
        if id_to_token.len() < 3
            || id_to_token[id_to_token.len() - 2] != UNK
            || id_to_token[id_to_token.len() - 1] != EOS
        {
            bail!(Format, "vocabulary must end with {UNK} and {EOS}");
        }
        Ok(Self::from_parts(id_to_token, freq))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Which part of a corpus file to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => bail!(Config, "unknown split '{other}'"),
        }
    }
}

/// Contiguous line split: first 90% train, next 5% valid, last 5% test.
pub fn split_corpus(text: &str, split: Split) -> &str {
    let starts: Vec<usize> = std::iter::once(0)
        .chain(text.match_indices('\n').map(|(i, _)| i + 1))
        .filter(|&i| i < text.len())
        .collect();
    let n = starts.len();
    let cut = |frac: usize| -> usize {
        let line = n * frac / 100;
        starts.get(line).copied().unwrap_or(text.len())
    };
    let (a, b) = (cut(90), cut(95));
    match split {
        Split::Train => &text[..a],
        Split::Valid => &text[a..b],
        Split::Test => &text[b..],
    }
}

/// One training example block: `inputs` and next-token `targets`, both
/// row-major `batch × seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Splits a token array into `batch` contiguous lanes and walks windows of
/// `seq` tokens through them. Lane-to-row order is reshuffled each epoch.
#[derive(Clone, Debug)]
pub struct BatchStream {
    ids: Arc<Vec<usize>>,
    batch: usize,
    seq: usize,
    lane_len: usize,
    windows: usize,
    cursor: usize,
    epoch: usize,
    lane_order: Vec<usize>,
    rng: Option<SeedStream>,
}

impl BatchStream {
    pub fn new(ids: Arc<Vec<usize>>, batch: usize, seq: usize, seed: Option<u64>) -> Result<Self> {
        if batch == 0 || seq == 0 {
            bail!(Config, "batch and sequence length must be positive");
        }
        if ids.len() < batch * (seq + 1) {
            bail!(
                Input,
                "corpus of {} tokens is too small for batch {batch} × (seq {seq} + 1)",
                ids.len()
            );
        }
        let lane_len = ids.len() / batch;
        let windows = (lane_len - 1) / seq;
        let mut s = Self {
            ids,
            batch,
            seq,
            lane_len,
            windows,
            cursor: 0,
            epoch: 0,
            lane_order: (0..batch).collect(),
            rng: seed.map(SeedStream::new),
        };
        s.shuffle_lanes();
        Ok(s)
    }

    fn shuffle_lanes(&mut self) {
        self.lane_order = (0..self.batch).collect();
        if let Some(rng) = &self.rng {
            rng.child(&format!("epoch-{}", self.epoch))
                .shuffle(&mut self.lane_order);
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows
    }

    /// `B·S·floor((len/B − 1)/S)`.
    pub fn targets_per_epoch(&self) -> usize {
        self.batch * self.seq * self.windows
    }

    /// Rewinds to the first batch of epoch 0.
    pub fn reset(&mut self) {
        self.cursor = 0;
        self.epoch = 0;
        self.shuffle_lanes();
    }

    /// Next batch, rolling over into a freshly shuffled epoch when needed.
    pub fn next_batch(&mut self) -> Batch {
        if self.cursor == self.windows {
            self.cursor = 0;
            self.epoch += 1;
            self.shuffle_lanes();
        }
        let (b, s) = (self.batch, self.seq);
        let mut inputs = Vec::with_capacity(b * s);
        let mut targets = Vec::with_capacity(b * s);
        for &lane in &self.lane_order {
            let start = lane * self.lane_len + self.cursor * s;
            inputs.extend_from_slice(&self.ids[start..start + s]);
            targets.extend_from_slice(&self.ids[start + 1..start + s + 1]);
        }
        self.cursor += 1;
        Batch {
            inputs,
            targets,
            batch: b,
            seq: s,
        }
    }
}
