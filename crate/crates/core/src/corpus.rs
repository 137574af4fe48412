//! Synthetic corpora, byte ingestion, and the corpus file format.
//!
//! Three deterministic synthetic languages cover the training needs:
//!
//! - `Cycle { period }` — one random distinct-token motif per corpus,
//!   repeated with a random phase per entry. Zero-entropy given one
//!   token of context, so both base and draft models can drive their
//!   losses to ~0 and acceptance to the ceiling.
//! - `Affine { mul, add }` — `x_{t+1} = (mul·x_t + add) mod V`. Also
//!   deterministic, but the successor function is position-free.
//! - `Markov { fanout }` — a fixed random transition table with
//!   `fanout` near-equiprobable successors per token. The near-ties
//!   make two models trained from different seeds disagree on argmax,
//!   which is what a teacher-mismatch experiment needs.
//!
//! File format: header `vocab=V count=N`, then one entry per line as
//! space-separated decimal token ids. Raw bytes ingest as `byte mod V`.

use crate::error::{Error, Result};
use crate::prng::Prng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusSource {
    Synthetic,
    Ingested,
    Distilled,
}

/// Generator family for [`gen_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Cycle { period: usize },
    Affine { mul: usize, add: usize },
    Markov { fanout: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub entries: Vec<Vec<usize>>,
    pub vocab: usize,
    pub source: CorpusSource,
}

impl Corpus {
    /// Validates the corpus invariants: every token in `[0, vocab)`,
    /// every entry at least two tokens.
    pub fn new(entries: Vec<Vec<usize>>, vocab: usize, source: CorpusSource) -> Result<Self> {
        let corpus = Corpus {
            entries,
            vocab,
            source,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::CorpusFormat(format!(
                "vocab must be >= 2, got {}",
                self.vocab
            )));
        }
        for (i, entry) in self.entries.iter().enumerate() {
            if entry.len() < 2 {
                return Err(Error::CorpusFormat(format!(
                    "entry {i} has {} tokens; entries need >= 2",
                    entry.len()
                )));
            }
            for &t in entry {
                if t >= self.vocab {
                    return Err(Error::TokenRange {
                        id: t,
                        vocab: self.vocab,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `vocab=V count=N` plus one line of space-separated ids
    /// per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("vocab={} count={}\n", self.vocab, self.entries.len());
        for entry in &self.entries {
            let line: Vec<String> = entry.iter().map(|t| t.to_string()).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads the [`Corpus::save`] format; the result is marked
    /// `Ingested` (the file format does not record provenance).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::CorpusFormat("empty file".into()))?;
        let mut vocab: Option<usize> = None;
        let mut count: Option<usize> = None;
        for field in header.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::CorpusFormat(format!("header field `{field}` is not key=value"))
            })?;
            let parsed = value
                .parse::<usize>()
                .map_err(|_| Error::CorpusFormat(format!("header `{key}` has bad value `{value}`")))?;
            match key {
                "vocab" => vocab = Some(parsed),
                "count" => count = Some(parsed),
                other => {
                    return Err(Error::CorpusFormat(format!("unknown header key `{other}`")))
                }
            }
        }
        let vocab = vocab.ok_or_else(|| Error::CorpusFormat("header missing `vocab`".into()))?;
        let count = count.ok_or_else(|| Error::CorpusFormat("header missing `count`".into()))?;
        let mut entries = Vec::with_capacity(count);
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut entry = Vec::new();
            for tok in line.split_whitespace() {
                let id = tok.parse::<usize>().map_err(|_| {
                    Error::CorpusFormat(format!("line {}: bad token `{tok}`", lineno + 2))
                })?;
                entry.push(id);
            }
            entries.push(entry);
        }
        if entries.len() != count {
            return Err(Error::CorpusFormat(format!(
                "header promises {count} entries, file has {}",
                entries.len()
            )));
        }
        Corpus::new(entries, vocab, CorpusSource::Ingested)
    }
}

/// Deterministic synthetic corpus of `size` entries, each `seq_len`
/// tokens over a vocabulary of `vocab >= 4`. Entry `i` derives its own
/// PRNG stream, so the corpus is stable under any generation order.
pub fn gen_corpus(
    kind: CorpusKind,
    size: usize,
    seq_len: usize,
    vocab: usize,
    seed: u64,
) -> Result<Corpus> {
    if vocab < 4 {
        return Err(Error::InvalidParam {
            name: "vocab",
            detail: format!("need >= 4, got {vocab}"),
        });
    }
    if size == 0 {
        return Err(Error::InvalidParam {
            name: "size",
            detail: "need at least one entry".into(),
        });
    }
    if seq_len < 2 {
        return Err(Error::InvalidParam {
            name: "seq_len",
            detail: format!("entries need >= 2 tokens, got {seq_len}"),
        });
    }
    match kind {
        CorpusKind::Cycle { period } => {
            if period == 0 || period > vocab {
                return Err(Error::InvalidParam {
                    name: "period",
                    detail: format!("need 1 <= period <= vocab, got {period}"),
                });
            }
        }
        CorpusKind::Affine { mul, add } => {
            if mul == 0 || mul >= vocab || add >= vocab {
                return Err(Error::InvalidParam {
                    name: "mul",
                    detail: format!("need 1 <= mul < vocab and add < vocab, got mul={mul} add={add}"),
                });
            }
        }
        CorpusKind::Markov { fanout } => {
            if fanout < 2 || fanout > vocab {
                return Err(Error::InvalidParam {
                    name: "fanout",
                    detail: format!("need 2 <= fanout <= vocab, got {fanout}"),
                });
            }
        }
    }

    let root = Prng::new(seed);
    // corpus-wide structure (motif / transition table) lives on its own
    // stream so entry streams stay independent of it
    let mut shared = root.derive(u64::MAX);
    let structure = match kind {
        CorpusKind::Cycle { period } => CycleOrTable::Motif(shared.distinct(vocab, period)?),
        CorpusKind::Affine { .. } => CycleOrTable::None,
        CorpusKind::Markov { fanout } => {
            let mut table = Vec::with_capacity(vocab);
            for _ in 0..vocab {
                let successors = shared.distinct(vocab, fanout)?;
                // near-tie weights: uniform in [0.45, 0.55], normalized
                let raw: Vec<f64> = (0..fanout).map(|_| 0.45 + 0.1 * shared.uniform()).collect();
                let total: f64 = raw.iter().sum();
                let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
                table.push((successors, probs));
            }
            CycleOrTable::Table(table)
        }
    };

    let mut entries = Vec::with_capacity(size);
    for i in 0..size {
        let mut prng = root.derive(i as u64);
        let mut entry = Vec::with_capacity(seq_len);
        match (&kind, &structure) {
            (CorpusKind::Cycle { period }, CycleOrTable::Motif(motif)) => {
                let phase = prng.below(*period);
                for t in 0..seq_len {
                    entry.push(motif[(t + phase) % period]);
                }
            }
            (CorpusKind::Affine { mul, add }, _) => {
                let mut x = prng.below(vocab);
                entry.push(x);
                for _ in 1..seq_len {
                    x = (mul * x + add) % vocab;
                    entry.push(x);
                }
            }
            (CorpusKind::Markov { .. }, CycleOrTable::Table(table)) => {
                let mut x = prng.below(vocab);
                entry.push(x);
                for _ in 1..seq_len {
                    let (successors, probs) = &table[x];
                    let mut u = prng.uniform();
                    let mut pick = successors[successors.len() - 1];
                    for (s, p) in successors.iter().zip(probs) {
                        if u < *p {
                            pick = *s;
                            break;
                        }
                        u -= p;
                    }
                    x = pick;
                    entry.push(x);
                }
            }
            _ => unreachable!("structure matches kind"),
        }
        entries.push(entry);
    }
    Corpus::new(entries, vocab, CorpusSource::Synthetic)
}

enum CycleOrTable {
    None,
    Motif(Vec<usize>),
    Table(Vec<(Vec<usize>, Vec<f64>)>),
}

/// Maps raw bytes to token ids modulo `vocab` and chunks them into
/// entries of `seq_len` tokens; a final chunk shorter than 2 tokens is
/// dropped.
pub fn ingest_bytes(bytes: &[u8], vocab: usize, seq_len: usize) -> Result<Corpus> {
    if vocab < 2 {
        return Err(Error::InvalidParam {
            name: "vocab",
            detail: format!("need >= 2, got {vocab}"),
        });
    }
    if seq_len < 2 {
        return Err(Error::InvalidParam {
            name: "seq_len",
            detail: format!("entries need >= 2 tokens, got {seq_len}"),
        });
    }
    let ids: Vec<usize> = bytes.iter().map(|&b| b as usize % vocab).collect();
    let mut entries: Vec<Vec<usize>> = ids.chunks(seq_len).map(|c| c.to_vec()).collect();
    if let Some(last) = entries.last() {
        if last.len() < 2 {
            entries.pop();
        }
    }
    Corpus::new(entries, vocab, CorpusSource::Ingested)
}
