//! Structural views of a vocabulary-to-code mapping: members per code,
//! cluster-size statistics, frequency mass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Vocabulary;
use crate::heads::VocabMapping;
use crate::{bail, Error, Result};

/// The tokens sharing one code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeClusterView {
    pub code: usize,
    /// Member ids by descending corpus frequency, ties by id.
    pub members: Vec<usize>,
    pub tokens: Vec<String>,
    pub freq_mass: u64,
}

impl CodeClusterView {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

fn check_sizes(map: &VocabMapping, vocab: &Vocabulary) -> Result<()> {
    if map.vocab_size() != vocab.len() {
        bail!(Dimension, "mapping covers {} tokens, vocabulary has {}", map.vocab_size(), vocab.len());
    }
    Ok(())
}

pub fn cluster_members(map: &VocabMapping, vocab: &Vocabulary, code: usize) -> Result<CodeClusterView> {
    check_sizes(map, vocab)?;
    if code >= map.num_codes() {
        bail!(Index, "code {code} out of range for K = {}", map.num_codes());
    }
    let mut members: Vec<usize> = map.members(code).collect();
    members.sort_by(|&a, &b| vocab.freq(b).cmp(&vocab.freq(a)).then(a.cmp(&b)));
    Ok(CodeClusterView {
        code,
        tokens: members.iter().map(|&i| vocab.token(i).to_string()).collect(),
        freq_mass: members.iter().map(|&i| vocab.freq(i)).sum(),
        members,
    })
}

/// Summary of how the vocabulary is spread over codes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub num_codes: usize,
    pub vocab_size: usize,
    pub sizes: Vec<usize>,
    /// Cluster size → number of codes of that size.
    pub size_histogram: BTreeMap<usize, usize>,
    /// Codes by descending size (ties by index), at most `top_n`.
    pub largest: Vec<(usize, usize)>,
    pub freq_mass: Vec<u64>,
    /// Entropy in nats of the distribution `size_j / V`.
    pub size_entropy: f64,
}

impl ClusterStats {
    pub fn empty_codes(&self) -> usize {
        self.size_histogram.get(&0).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "codes\t{}\nvocab\t{}\nempty\t{}\nentropy_nats\t{:.6}\nmax_entropy_nats\t{:.6}\n",
            self.num_codes,
            self.vocab_size,
            self.empty_codes(),
            self.size_entropy,
            (self.num_codes.min(self.vocab_size) as f64).ln()
        );
        out.push_str("size\tcodes\n");
        for (size, n) in &self.size_histogram {
            let _ = writeln!(out, "{size}\t{n}");
        }
        out.push_str("largest\tsize\tfreq_mass\n");
        for &(code, size) in &self.largest {
            let _ = writeln!(out, "{code}\t{size}\t{}", self.freq_mass[code]);
        }
        out
    }
}

pub fn cluster_stats(map: &VocabMapping, vocab: &Vocabulary, top_n: usize) -> Result<ClusterStats> {
    check_sizes(map, vocab)?;
    let sizes = map.counts().to_vec();
    let mut freq_mass = vec![0u64; map.num_codes()];
    for (i, &c) in map.codes().iter().enumerate() {
        freq_mass[c] += vocab.freq(i);
    }
    let mut size_histogram = BTreeMap::new();
    for &s in &sizes {
        *size_histogram.entry(s).or_insert(0) += 1;
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let v = map.vocab_size() as f64;
    let size_entropy = sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / v;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(ClusterStats {
        num_codes: map.num_codes(),
        vocab_size: map.vocab_size(),
        largest: order.into_iter().take(top_n).map(|c| (c, sizes[c])).collect(),
        sizes,
        size_histogram,
        freq_mass,
        size_entropy,
    })
}

/// One line per cluster: `code<TAB>size<TAB>freq_mass<TAB>member...`,
/// listing at most `max_members` members (all when 0).
pub fn clusters_text(views: &[CodeClusterView], max_members: usize) -> String {
    let mut out = String::new();
    for v in views {
        let _ = write!(out, "{}\t{}\t{}", v.code, v.size(), v.freq_mass);
        for t in limit(&v.tokens, max_members) {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
    }
    out
}

/// The same table as CSV with members joined by spaces in one field.
pub fn clusters_csv(views: &[CodeClusterView], max_members: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["code", "size", "freq_mass", "top_members"]).map_err(csv_error)?;
    for v in views {
        w.write_record([
            v.code.to_string(),
            v.size().to_string(),
            v.freq_mass.to_string(),
            limit(&v.tokens, max_members).join(" "),
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn limit(tokens: &[String], max: usize) -> &[String] {
    if max == 0 {
        tokens
    } else {
        &tokens[..max.min(tokens.len())]
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
