use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{DataError, MultimodalExample};
use crate::numerics::Tensor;

/// Token vectors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Parses `token v1 v2 ...` lines. A repeated token keeps its first
    /// position but takes the values of its last line.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut tokens = Vec::new();
        let mut vectors: Vec<Vec<f64>> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| DataError::Embedding {
                        line: i + 1,
                        message: format!("{p:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err(DataError::Embedding {
                    line: i + 1,
                    message: format!("token {token} has no values"),
                });
            }
            if let Some(first) = vectors.first() {
                if first.len() != values.len() {
                    return Err(DataError::Embedding {
                        line: i + 1,
                        message: format!("{} values, expected {}", values.len(), first.len()),
                    });
                }
            }
            match index.get(token) {
                Some(&at) => {
                    log::warn!(
                        "embeddings line {}: duplicate token {token}, keeping the later vector",
                        i + 1
                    );
                    vectors[at] = values;
                }
                None => {
                    index.insert(token.to_string(), tokens.len());
                    tokens.push(token.to_string());
                    vectors.push(values);
                }
            }
        }
        Ok(Self { tokens, vectors })
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            write!(w, "{t}")?;
            for x in v {
                write!(w, " {x:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}

pub fn load_embeddings(path: &Path) -> Result<Embeddings, DataError> {
    Embeddings::parse(BufReader::new(fs::File::open(path)?))
}

/// What [`Vocabulary::filter_oov`] removed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OovReport {
    pub dropped_tokens: usize,
    pub affected_examples: usize,
    /// Examples left with no words, removed entirely.
    pub emptied_examples: usize,
}

/// Dense token ids, their embedding rows and corpus unigram counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub fn from_embeddings(emb: &Embeddings) -> Result<Self, DataError> {
        if emb.tokens.is_empty() {
            return Err(DataError::InvalidArgument(
                "embedding table is empty".into(),
            ));
        }
        let index = emb
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let table = Tensor::from_rows(&emb.vectors)?;
        Ok(Self {
            tokens: emb.tokens.clone(),
            index,
            table,
            counts: vec![0; emb.tokens.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count_unigrams(&mut self, examples: &[MultimodalExample]) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for ex in examples {
            for w in &ex.words {
                if let Some(id) = self.id(w) {
                    self.counts[id] += 1;
                }
            }
        }
    }

    /// Drops out-of-vocabulary words together with their boundaries.
    pub fn filter_oov(
        &self,
        examples: Vec<MultimodalExample>,
    ) -> (Vec<MultimodalExample>, OovReport) {
        let mut report = OovReport::default();
        let mut kept = Vec::with_capacity(examples.len());
        for mut ex in examples {
            let before = ex.words.len();
            let (words, boundaries): (Vec<_>, Vec<_>) = ex
                .words
                .into_iter()
                .zip(ex.boundaries)
                .filter(|(w, _)| self.index.contains_key(w))
                .unzip();
            ex.words = words;
            ex.boundaries = boundaries;
            let dropped = before - ex.words.len();
            if dropped > 0 {
                report.dropped_tokens += dropped;
                report.affected_examples += 1;
            }
            if ex.words.is_empty() {
                report.emptied_examples += 1;
                continue;
            }
            kept.push(ex);
        }
        if report.dropped_tokens > 0 {
            log::info!(
                "dropped {} out-of-vocabulary tokens from {} examples ({} examples left empty and removed)",
                report.dropped_tokens,
                report.affected_examples,
                report.emptied_examples
            );
        }
        (kept, report)
    }

    pub fn encode(&self, example: &MultimodalExample) -> Result<Vec<usize>, DataError> {
        example
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                self.id(w).ok_or_else(|| DataError::Record {
                    id: example.id.clone(),
                    field: format!("words[{i}]"),
                    message: format!("token {w:?} not in vocabulary"),
                })
            })
            .collect()
    }

    /// Embedding rows for `ids`, `[ids.len() × dim]`.
    pub fn embed(&self, ids: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.table.row(id));
        }
        Tensor::new(vec![ids.len(), d], data).expect("rows match dim")
    }
}
