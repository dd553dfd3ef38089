//! Edit distance, WER and ExpRate over token sequences.
//!
//! Edits transform the prediction into the truth: an insertion adds a truth
//! token, a deletion removes a predicted token.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("truth sequence is empty; WER is undefined")]
    EmptyTruth,
    #[error("no examples to score")]
    NoExamples,
}

/// One step of an edit script. Indices refer to the original sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Keep { pred: usize, truth: usize },
    Substitute { pred: usize, truth: usize },
    Delete { pred: usize },
    Insert { truth: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditBreakdown {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub truth_len: usize,
    /// One optimal script, in sequence order.
    pub script: Vec<EditOp>,
}

impl EditBreakdown {
    pub fn distance(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }

    /// Applies the script to `pred`, producing the truth sequence.
    pub fn apply<T: Clone>(&self, pred: &[T], truth: &[T]) -> Vec<T> {
        self.script
            .iter()
            .filter_map(|op| match *op {
                EditOp::Keep { pred: i, .. } => Some(pred[i].clone()),
                EditOp::Substitute { truth: j, .. } | EditOp::Insert { truth: j } => Some(truth[j].clone()),
                EditOp::Delete { .. } => None,
            })
            .collect()
    }
}

/// Unit-cost Levenshtein distance with a backtraced script. Among optimal
/// scripts the backtrace prefers substitution (or match), then deletion,
/// then insertion.
pub fn edit_distance<T: PartialEq>(pred: &[T], truth: &[T]) -> EditBreakdown {
    let (n, m) = (pred.len(), truth.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(pred[i - 1] != truth[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut out = EditBreakdown {
        insertions: 0,
        deletions: 0,
        substitutions: 0,
        truth_len: m,
        script: Vec::with_capacity(n.max(m)),
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = pred[i - 1] == truth[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                i -= 1;
                j -= 1;
                if same {
                    out.script.push(EditOp::Keep { pred: i, truth: j });
                } else {
                    out.substitutions += 1;
                    out.script.push(EditOp::Substitute { pred: i, truth: j });
                }
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            i -= 1;
            out.deletions += 1;
            out.script.push(EditOp::Delete { pred: i });
        } else {
            j -= 1;
            out.insertions += 1;
            out.script.push(EditOp::Insert { truth: j });
        }
    }
    out.script.reverse();
    out
}

/// Word error rate: edit distance over truth length. May exceed 1.
pub fn wer<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    Ok(edit_distance(pred, truth).distance() as f64 / truth.len() as f64)
}

/// Fraction of pairs whose prediction equals the truth exactly.
pub fn exprate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    let exact = pairs.iter().filter(|(p, t)| p == t).count();
    Ok(exact as f64 / pairs.len() as f64)
}

/// Pooled corpus WER: total distance over total truth length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    let mut dist = 0;
    let mut len = 0;
    for (p, t) in pairs {
        if t.is_empty() {
            return Err(MetricsError::EmptyTruth);
        }
        dist += edit_distance(p, t).distance();
        len += t.len();
    }
    Ok(dist as f64 / len as f64)
}

/// Per-example diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScore {
    pub id: String,
    pub breakdown: EditBreakdown,
    pub wer: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScore {
    pub examples: Vec<ExampleScore>,
    /// Pooled Σ distance / Σ truth length.
    pub wer: f64,
    /// Mean of per-example WER.
    pub mean_wer: f64,
    pub exprate: f64,
}

impl CorpusScore {
    /// Scores `(id, pred, truth)` triples.
    pub fn compute<T: PartialEq>(items: &[(String, Vec<T>, Vec<T>)]) -> Result<Self, MetricsError> {
        if items.is_empty() {
            return Err(MetricsError::NoExamples);
        }
        let mut examples = Vec::with_capacity(items.len());
        let (mut dist, mut len) = (0usize, 0usize);
        for (id, pred, truth) in items {
            if truth.is_empty() {
                return Err(MetricsError::EmptyTruth);
            }
            let breakdown = edit_distance(pred, truth);
            dist += breakdown.distance();
            len += truth.len();
            examples.push(ExampleScore {
                id: id.clone(),
                wer: breakdown.distance() as f64 / truth.len() as f64,
                exact: pred == truth,
                breakdown,
            });
        }
        let n = examples.len() as f64;
        Ok(Self {
            wer: dist as f64 / len as f64,
            mean_wer: examples.iter().map(|e| e.wer).sum::<f64>() / n,
            exprate: examples.iter().filter(|e| e.exact).count() as f64 / n,
            examples,
        })
    }

    /// Human-readable per-example table followed by corpus totals.
    pub fn table(&self) -> String {
        let idw = self.examples.iter().map(|e| e.id.len()).max().unwrap_or(2).max(2);
        let mut s = format!("{:<idw$}  dist  ins  del  sub  len  wer\n", "id");
        for e in &self.examples {
            let b = &e.breakdown;
            let _ = writeln!(
                s,
                "{:<idw$}  {:>4}  {:>3}  {:>3}  {:>3}  {:>3}  {:.4}",
                e.id,
                b.distance(),
                b.insertions,
                b.deletions,
                b.substitutions,
                b.truth_len,
                e.wer
            );
        }
        let _ = writeln!(
            s,
            "corpus wer {:.4} (mean per-example {:.4}), exprate {:.4} over {} examples",
            self.wer,
            self.mean_wer,
            self.exprate,
            self.examples.len()
        );
        s
    }

    /// Machine-readable one-line summary.
    pub fn summary(&self) -> String {
        format!(
            "exprate={:?} wer={:?} mean_wer={:?} samples={}",
            self.exprate,
            self.wer,
            self.mean_wer,
            self.examples.len()
        )
    }
}
