//! Unigram TF-IDF with smoothed idf and L2-normalized rows.

use std::collections::{BTreeMap, BTreeSet};

use crate::games::words;

use super::AuditError;

/// Sparse row: (column, value) sorted by column.
pub type SparseRow = Vec<(usize, f64)>;

pub fn tokenize(text: &str) -> Vec<String> {
    words(text).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfidfVectorizer {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
}

impl TfidfVectorizer {
    /// Vocabulary columns follow lexicographic token order.
    pub fn fit(corpus: &[Vec<String>]) -> Result<Self, AuditError> {
        if corpus.is_empty() {
            return Err(AuditError::EmptyCorpus);
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in corpus {
            let uniq: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let mut vocabulary = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (k, (t, d)) in df.into_iter().enumerate() {
            vocabulary.insert(t.to_string(), k);
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
        }
        Ok(TfidfVectorizer { vocabulary, idf })
    }

    pub fn transform(&self, doc: &[String]) -> SparseRow {
        tfidf_row(&self.vocabulary, &self.idf, doc)
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }
}

/// Raw counts times idf, L2-normalized; unknown tokens are dropped and an
/// empty row stays empty.
pub fn tfidf_row(vocabulary: &BTreeMap<String, usize>, idf: &[f64], doc: &[String]) -> SparseRow {
    let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
    for t in doc {
        if let Some(&k) = vocabulary.get(t) {
            *tf.entry(k).or_default() += 1.0;
        }
    }
    let mut row: SparseRow = tf.into_iter().map(|(k, c)| (k, c * idf[k])).collect();
    let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|(_, v)| *v /= norm);
    }
    row
}

/// Fits on `corpus` when `fit` is true, otherwise reuses `fitted`.
pub fn tfidf_vectorize(
    corpus: &[Vec<String>],
    fit: bool,
    fitted: Option<&TfidfVectorizer>,
) -> Result<(Vec<SparseRow>, TfidfVectorizer), AuditError> {
    let vec = match (fit, fitted) {
        (true, _) => TfidfVectorizer::fit(corpus)?,
        (false, Some(v)) => v.clone(),
        (false, None) => return Err(AuditError::NotFitted),
    };
    let rows = corpus.iter().map(|d| vec.transform(d)).collect();
    Ok((rows, vec))
}
