//! TracIn influence: gradient similarity, checkpoint accumulation, top-k
//! retrieval and frequency aggregation.
//!
//! Scores are similarities, so larger means more influential. The leading
//! minus sign of the first-order TracIn estimate is dropped; the sign of each
//! score is kept in [`InfluenceRecord::score`] (positive: proponent,
//! negative: opponent).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{self, Checkpoint};

/// Gradients with a norm below this get cosine similarity 0.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Cosine,
    Dot,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Cosine => "cosine",
            Measure::Dot => "dot",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Measure::Cosine),
            "dot" => Ok(Measure::Dot),
            _ => Err(format!("unknown measure `{s}` (expected cosine|dot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub owner_id: String,
    pub checkpoint_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub val_id: String,
    pub train_id: String,
    pub score: f64,
    pub measure: Measure,
    pub checkpoint_epochs: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn similarity_slices(a: &[f64], b: &[f64], measure: Measure) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "gradient lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let d = dot(a, b);
    Ok(match measure {
        Measure::Dot => d,
        Measure::Cosine => cosine_from_parts(d, norm(a), norm(b)),
    })
}

pub fn similarity(g_test: &GradientVector, g_train: &GradientVector, measure: Measure) -> Result<f64> {
    similarity_slices(&g_test.values, &g_train.values, measure)
}

pub fn gradient_vector(checkpoint: &Checkpoint, example: &Example, encoder: &Encoder) -> Result<GradientVector> {
    Ok(GradientVector {
        values: model::per_example_gradient(&checkpoint.params, example, encoder)?,
        owner_id: example.id.clone(),
        checkpoint_epoch: checkpoint.epoch,
    })
}

/// Sum over checkpoints of the gradient similarity between `z_test` and `z_train`.
pub fn influence(
    checkpoints: &[Checkpoint],
    z_train: &Example,
    z_test: &Example,
    measure: Measure,
    encoder: &Encoder,
) -> Result<f64> {
    if checkpoints.is_empty() {
        return Err(Error::Contract("influence needs at least one checkpoint".into()));
    }
    let mut total = 0.0;
    for cp in checkpoints {
        let g_test = gradient_vector(cp, z_test, encoder)?;
        let g_train = gradient_vector(cp, z_train, encoder)?;
        total += similarity(&g_test, &g_train, measure)?;
    }
    Ok(total)
}

/// Ranking order: descending score, ascending id on ties.
///
/// Cosine scores are compared on a 2^-40 grid so that rescaling noise at the
/// last ulp cannot reorder exactly tied candidates.
fn rank_cmp(measure: Measure, a: (f64, &str), b: (f64, &str)) -> Ordering {
    let key = |s: f64| match measure {
        Measure::Cosine => (s * (1u64 << 40) as f64).round(),
        Measure::Dot => s,
    };
    key(b.0).total_cmp(&key(a.0)).then_with(|| a.1.cmp(b.1))
}

/// Candidate vectors for retrieval, one "view" per checkpoint.
///
/// Gradient retrieval and the embedding baseline share this index; the
/// embedding baseline uses a single view holding the encoder embeddings.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    /// `views[c][i]` is candidate `i` under checkpoint `c`.
    views: Vec<Vec<Vec<f64>>>,
    norms: Vec<Vec<f64>>,
    epochs: Vec<usize>,
    measure: Measure,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<String>, views: Vec<Vec<Vec<f64>>>, epochs: Vec<usize>, measure: Measure) -> Result<Self> {
        if views.is_empty() || views.len() != epochs.len() {
            return Err(Error::Contract("one epoch label per non-empty view required".into()));
        }
        if views.iter().any(|v| v.len() != ids.len()) {
            return Err(Error::Contract("every view must hold one vector per candidate".into()));
        }
        let norms = views.iter().map(|v| v.iter().map(|g| norm(g)).collect()).collect();
        Ok(RetrievalIndex {
            ids,
            views,
            norms,
            epochs,
            measure,
        })
    }

    /// Gradients of `candidates` under every checkpoint.
    pub fn from_gradients(
        checkpoints: &[Checkpoint],
        candidates: &[Example],
        measure: Measure,
        encoder: &Encoder,
    ) -> Result<Self> {
        let embeddings: Vec<_> = candidates.iter().map(|e| encoder.embed_text(&e.text)).collect();
        let mut views = Vec::with_capacity(checkpoints.len());
        for cp in checkpoints {
            let view = candidates
                .iter()
                .zip(&embeddings)
                .map(|(ex, e)| model::gradient_embedded(&cp.params, e.as_slice(), ex.label))
                .collect::<Result<Vec<_>>>()?;
            views.push(view);
        }
        Self::new(
            candidates.iter().map(|e| e.id.clone()).collect(),
            views,
            checkpoints.iter().map(|c| c.epoch).collect(),
            measure,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    /// Summed similarity of every candidate to `query` (one vector per view).
    pub fn scores(&self, query: &[Vec<f64>]) -> Result<Vec<f64>> {
        if query.len() != self.views.len() {
            return Err(Error::Contract(format!(
                "query has {} views, index has {}",
                query.len(),
                self.views.len()
            )));
        }
        let mut out = vec![0.0; self.ids.len()];
        for ((view, norms), q) in self.views.iter().zip(&self.norms).zip(query) {
            let qn = norm(q);
            for ((slot, g), &gn) in out.iter_mut().zip(view).zip(norms) {
                if g.len() != q.len() {
                    return Err(Error::Contract("query and candidate lengths differ".into()));
                }
                let d = dot(q, g);
                *slot += match self.measure {
                    Measure::Dot => d,
                    Measure::Cosine => cosine_from_parts(d, qn, gn),
                };
            }
        }
        Ok(out)
    }

    /// The `k` highest-scoring candidates, descending, ties by ascending id.
    pub fn top_k(&self, val_id: &str, query: &[Vec<f64>], k: usize) -> Result<Vec<InfluenceRecord>> {
        if k > self.ids.len() {
            return Err(Error::Contract(format!(
                "k = {k} exceeds the {} candidates",
                self.ids.len()
            )));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| rank_cmp(self.measure, (scores[a], &self.ids[a]), (scores[b], &self.ids[b])));
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| InfluenceRecord {
                val_id: val_id.to_string(),
                train_id: self.ids[i].clone(),
                score: scores[i],
                measure: self.measure,
                checkpoint_epochs: self.epochs.clone(),
            })
            .collect())
    }
}

/// Gradient of `z_test` under each checkpoint, in the index's view order.
pub fn query_gradients(checkpoints: &[Checkpoint], z_test: &Example, encoder: &Encoder) -> Result<Vec<Vec<f64>>> {
    let e = encoder.embed_text(&z_test.text);
    checkpoints
        .iter()
        .map(|cp| model::gradient_embedded(&cp.params, e.as_slice(), z_test.label))
        .collect()
}

/// The `k` training examples with the highest influence on `z_test`.
pub fn top_k_influential(
    checkpoints: &[Checkpoint],
    train_set: &[Example],
    z_test: &Example,
    k: usize,
    measure: Measure,
    encoder: &Encoder,
) -> Result<Vec<InfluenceRecord>> {
    if checkpoints.is_empty() {
        return Err(Error::Contract("influence needs at least one checkpoint".into()));
    }
    let index = RetrievalIndex::from_gradients(checkpoints, train_set, measure, encoder)?;
    index.top_k(&z_test.id, &query_gradients(checkpoints, z_test, encoder)?, k)
}

/// Rank retrieved training ids by how often they appear across all lists and
/// keep the `tau` most frequent. Ties go to the higher summed score, then to
/// the smaller id. Returns fewer than `tau` ids when fewer distinct ids exist.
pub fn aggregate_by_frequency(retrievals: &[Vec<InfluenceRecord>], tau: usize) -> Vec<String> {
    let mut tally: HashMap<&str, (usize, f64)> = HashMap::new();
    for rec in retrievals.iter().flatten() {
        let entry = tally.entry(rec.train_id.as_str()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += rec.score;
    }
    let mut ranked: Vec<(&str, usize, f64)> = tally.into_iter().map(|(id, (c, s))| (id, c, s)).collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| b.2.total_cmp(&a.2))
            .then_with(|| a.0.cmp(b.0))
    });
    ranked.into_iter().take(tau).map(|(id, _, _)| id.to_string()).collect()
}

/// Write records as CSV: `val_id,train_id,score,measure,checkpoint_epochs`,
/// with epochs joined by `;`.
pub fn write_influence_csv(path: &Path, records: &[InfluenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["val_id", "train_id", "score", "measure", "checkpoint_epochs"])?;
    for r in records {
        let epochs = r
            .checkpoint_epochs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.val_id.as_str(),
            r.train_id.as_str(),
            &r.score.to_string(),
            r.measure.as_str(),
            &epochs,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
