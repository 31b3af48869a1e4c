//! Gradient-based automated iterative recovery.
//!
//! Each iteration retrains the prompt from scratch on the current training
//! set, samples a validation subset, collects its misclassified examples,
//! retrieves their `k` most influential training examples, and relabels (or
//! removes) the `tau` training examples retrieved most often.
//!
//! Report numbering: iteration 0 is the model trained on the clean training
//! set; iterations `1..=n` are recovery iterations (iteration 1 trains on the
//! freshly corrupted set, so its AP is the corrupted AP); iteration `n + 1`
//! evaluates the model trained after the last intervention.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{self, CorruptionRecord, DatasetSplit, Example, Label};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, Checkpoint, PromptHeadParams, Sample, TrainConfig};
use crate::seeds::{self, Stream};
use crate::tracin::{self, InfluenceRecord, Measure, RetrievalIndex};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($name::$variant),)+
                    _ => Err(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected {})"),
                        s,
                        [$($s),+].join("|")
                    )),
                }
            }
        }
    };
}

string_enum!(Method {
    Gbair => "gbair",
    Random => "random",
    Embedding => "embedding",
});

string_enum!(Intervention {
    Relabel => "relabel",
    Remove => "remove",
});

// Label used for the misclassified example's loss gradient. `predicted` makes
// training examples that back the wrong prediction rank as proponents.
string_enum!(QueryLabel {
    Predicted => "predicted",
    Gold => "gold",
});

string_enum!(CheckpointSet {
    Best => "best",
    All => "all",
});

string_enum!(Stage {
    Clean => "clean",
    Recovery => "recovery",
    Final => "final",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_iterations: usize,
    pub k: usize,
    pub tau: usize,
    pub val_subset_size: usize,
    pub checkpoint_eval_size: usize,
    pub corruption_rate: f64,
    pub measure: Measure,
    pub method: Method,
    pub intervention: Intervention,
    pub query_label: QueryLabel,
    pub checkpoints: CheckpointSet,
    /// Draw a class-balanced training sample of this size from the train pool.
    pub train_sample_size: Option<usize>,
    /// Keep per-example influence retrievals for later inspection.
    pub store_influence: bool,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            n_iterations: 10,
            k: 3,
            tau: 20,
            val_subset_size: 500,
            checkpoint_eval_size: 200,
            corruption_rate: 0.3,
            measure: Measure::Cosine,
            method: Method::Gbair,
            intervention: Intervention::Relabel,
            query_label: QueryLabel::Predicted,
            checkpoints: CheckpointSet::Best,
            train_sample_size: None,
            store_influence: false,
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Range checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::invalid(
                "corruption_rate",
                format!("must lie in [0, 1], got {}", self.corruption_rate),
            ));
        }
        for (field, v) in [
            ("n_iterations", self.n_iterations),
            ("k", self.k),
            ("tau", self.tau),
            ("val_subset_size", self.val_subset_size),
            ("checkpoint_eval_size", self.checkpoint_eval_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.train_sample_size == Some(0) {
            return Err(Error::invalid("train_sample_size", "must be at least 1"));
        }
        self.train.validate()?;
        self.encoder.validate()
    }

    /// Full validation against the split the experiment will run on.
    pub fn validate_for(&self, split: &DatasetSplit) -> Result<()> {
        self.validate()?;
        let n_train = self.train_sample_size.unwrap_or(split.train.len());
        if self.train_sample_size.is_some_and(|n| n > split.train.len()) {
            return Err(Error::invalid(
                "train_sample_size",
                format!("exceeds the {} available training examples", split.train.len()),
            ));
        }
        if self.tau > n_train {
            return Err(Error::invalid(
                "tau",
                format!("{} exceeds the training set size {n_train}", self.tau),
            ));
        }
        for (field, v) in [
            ("val_subset_size", self.val_subset_size),
            ("checkpoint_eval_size", self.checkpoint_eval_size),
        ] {
            if v > split.val.len() {
                return Err(Error::invalid(
                    field,
                    format!("{v} exceeds the validation set size {}", split.val.len()),
                ));
            }
        }
        if !split.test.iter().any(|e| e.label.is_positive()) {
            return Err(Error::Validation("test split has no positive example".into()));
        }
        split.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub stage: Stage,
    pub test_ap: f64,
    pub selected_ids: Vec<String>,
    /// Share of `selected_ids` in the original corruption set.
    pub hit_fraction: f64,
    pub checkpoint_epoch: usize,
    pub misclassified_count: usize,
    pub train_size: usize,
    /// Share of originally corrupted examples whose label is restored or that
    /// were removed, measured after this iteration's intervention.
    pub recovered_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExample {
    pub train_id: String,
    pub text: String,
    pub label: Label,
    pub score: f64,
}

/// One misclassified validation example with its retrieved training examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub iteration: usize,
    pub val_id: String,
    pub val_text: String,
    pub val_label: Label,
    pub prediction: f64,
    pub measure: Measure,
    pub checkpoint_epochs: Vec<usize>,
    pub retrieved: Vec<RetrievedExample>,
}

/// Frozen embeddings for every example seen in an experiment.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    encoder: Encoder,
    table: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new<'a>(encoder: Encoder, examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let table = examples
            .into_iter()
            .map(|e| (e.id.clone(), encoder.embed_text(&e.text).0))
            .collect();
        EmbeddingCache { encoder, table }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Embedding by id; texts never change, so unknown ids are embedded on the fly.
    pub fn get(&self, ex: &Example) -> Cow<'_, [f64]> {
        match self.table.get(&ex.id) {
            Some(v) => Cow::Borrowed(v.as_slice()),
            None => Cow::Owned(self.encoder.embed_text(&ex.text).0),
        }
    }

    fn samples<'a>(&'a self, examples: &'a [Example]) -> Vec<Sample<'a>> {
        examples
            .iter()
            .map(|ex| {
                let e = self.table.get(&ex.id).expect("example embedded at construction");
                (e.as_slice(), ex.label)
            })
            .collect()
    }
}

pub fn predict(params: &PromptHeadParams, examples: &[Example], cache: &EmbeddingCache) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| model::forward(params, &cache.get(ex)))
        .collect()
}

/// Examples whose prediction thresholded at 0.5 disagrees with their label,
/// paired with the predicted probability.
pub fn get_misclassified(
    params: &PromptHeadParams,
    val_subset: &[Example],
    cache: &EmbeddingCache,
) -> Result<Vec<(Example, f64)>> {
    let scores = predict(params, val_subset, cache)?;
    Ok(val_subset
        .iter()
        .zip(scores)
        .filter(|(ex, p)| Label::from_probability(*p) != ex.label)
        .map(|(ex, p)| (ex.clone(), p))
        .collect())
}

/// Test-set average precision with NOTOK as the positive class.
pub fn test_ap(params: &PromptHeadParams, test: &[Example], cache: &EmbeddingCache) -> Result<f64> {
    let scores = predict(params, test, cache)?;
    let pairs: Vec<(f64, bool)> = scores
        .into_iter()
        .zip(test)
        .map(|(s, ex)| (s, ex.label.is_positive()))
        .collect();
    metrics::average_precision(&pairs)
}

/// Everything `select_examples` needs from the current iteration.
pub struct SelectionInput<'a> {
    pub train: &'a [Example],
    pub misclassified: &'a [(Example, f64)],
    pub checkpoints: &'a [Checkpoint],
    pub cache: &'a EmbeddingCache,
    pub iteration: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub ids: Vec<String>,
    pub retrievals: Vec<Vec<InfluenceRecord>>,
}

fn query_example(ex: &Example, prediction: f64, label: QueryLabel) -> Example {
    let mut q = ex.clone();
    if label == QueryLabel::Predicted {
        q.label = Label::from_probability(prediction);
    }
    q
}

/// Choose up to `tau` training ids to intervene on.
pub fn select_examples(method: Method, input: &SelectionInput<'_>, config: &ExperimentConfig) -> Result<Selection> {
    let train = input.train;
    match method {
        Method::Random => {
            let mut rng = seeds::rng(config.seed, Stream::RandomBaseline, input.iteration as u64);
            let n = config.tau.min(train.len());
            let ids = index::sample(&mut rng, train.len(), n)
                .into_iter()
                .map(|i| train[i].id.clone())
                .collect();
            Ok(Selection {
                ids,
                retrievals: Vec::new(),
            })
        }
        Method::Gbair | Method::Embedding => {
            if input.misclassified.is_empty() || train.is_empty() {
                return Ok(Selection::default());
            }
            let index = match method {
                Method::Gbair => gradient_index(input, config.measure)?,
                _ => embedding_index(input)?,
            };
            let k = config.k.min(train.len());
            let mut retrievals = Vec::with_capacity(input.misclassified.len());
            for (ex, p) in input.misclassified {
                let query = match method {
                    Method::Gbair => {
                        let q = query_example(ex, *p, config.query_label);
                        let e = input.cache.get(&q);
                        input
                            .checkpoints
                            .iter()
                            .map(|cp| model::gradient_embedded(&cp.params, &e, q.label))
                            .collect::<Result<Vec<_>>>()?
                    }
                    _ => vec![input.cache.get(ex).into_owned()],
                };
                retrievals.push(index.top_k(&ex.id, &query, k)?);
            }
            Ok(Selection {
                ids: tracin::aggregate_by_frequency(&retrievals, config.tau),
                retrievals,
            })
        }
    }
}

fn gradient_index(input: &SelectionInput<'_>, measure: Measure) -> Result<RetrievalIndex> {
    let samples = input.cache.samples(input.train);
    let views = input
        .checkpoints
        .iter()
        .map(|cp| {
            samples
                .iter()
                .map(|(e, y)| model::gradient_embedded(&cp.params, e, *y))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(
        input.train.iter().map(|e| e.id.clone()).collect(),
        views,
        input.checkpoints.iter().map(|c| c.epoch).collect(),
        measure,
    )
}

fn embedding_index(input: &SelectionInput<'_>) -> Result<RetrievalIndex> {
    let view = input.train.iter().map(|e| input.cache.get(e).into_owned()).collect();
    RetrievalIndex::new(
        input.train.iter().map(|e| e.id.clone()).collect(),
        vec![view],
        vec![0],
        Measure::Cosine,
    )
}

/// Relabel flips each selected example; remove deletes it.
pub fn apply_intervention(train: &mut Vec<Example>, ids: &[String], intervention: Intervention) -> Result<()> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    if wanted.len() != ids.len() {
        return Err(Error::Contract("intervention ids contain duplicates".into()));
    }
    let present: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    if let Some(missing) = ids.iter().find(|id| !present.contains(id.as_str())) {
        return Err(Error::Contract(format!(
            "id `{missing}` is not in the current training set"
        )));
    }
    match intervention {
        Intervention::Relabel => train
            .iter_mut()
            .filter(|e| wanted.contains(e.id.as_str()))
            .for_each(Example::flip_label),
        Intervention::Remove => train.retain(|e| !wanted.contains(e.id.as_str())),
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub current_train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub corruption: CorruptionRecord,
    pub history: Vec<IterationReport>,
}

impl ExperimentState {
    pub fn recovered_fraction(&self) -> f64 {
        let total = self.corruption.corrupted_ids.len();
        if total == 0 {
            return 0.0;
        }
        let still_wrong = self
            .current_train
            .iter()
            .filter(|e| self.corruption.corrupted_ids.contains(&e.id) && e.label != e.original_label)
            .count();
        (total - still_wrong) as f64 / total as f64
    }
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub clean_ap: f64,
    pub corrupted_ap: f64,
    pub final_ap: f64,
    /// Best AP after at least one intervention.
    pub best_ap: f64,
    pub ci2r: f64,
    pub recovered_fraction: f64,
}

impl RunSummary {
    pub fn from_reports(reports: &[IterationReport]) -> Option<RunSummary> {
        let clean = reports.iter().find(|r| r.stage == Stage::Clean)?;
        let recovery: Vec<&IterationReport> = reports.iter().filter(|r| r.stage == Stage::Recovery).collect();
        let last = reports.last()?;
        let corrupted = recovery.first()?;
        let best_ap = reports
            .iter()
            .filter(|r| r.iteration >= 2)
            .map(|r| r.test_ap)
            .fold(f64::NEG_INFINITY, f64::max);
        Some(RunSummary {
            clean_ap: clean.test_ap,
            corrupted_ap: corrupted.test_ap,
            final_ap: last.test_ap,
            best_ap,
            ci2r: recovery.iter().map(|r| r.hit_fraction).sum::<f64>() / recovery.len() as f64,
            recovered_fraction: last.recovered_fraction,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub reports: Vec<IterationReport>,
    pub corruption: CorruptionRecord,
    pub influence: Vec<InfluenceEntry>,
}

impl RunOutput {
    pub fn summary(&self) -> RunSummary {
        RunSummary::from_reports(&self.reports).expect("complete run has clean and recovery reports")
    }

    /// Selections of the recovery iterations, in order.
    pub fn selections(&self) -> Vec<Vec<String>> {
        self.reports
            .iter()
            .filter(|r| r.stage == Stage::Recovery)
            .map(|r| r.selected_ids.clone())
            .collect()
    }
}

/// A single experiment: corrupted state plus the frozen encoder cache.
pub struct Experiment {
    config: ExperimentConfig,
    cache: EmbeddingCache,
    clean_train: Vec<Example>,
    state: ExperimentState,
    influence: Vec<InfluenceEntry>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, split: &DatasetSplit) -> Result<Self> {
        config.validate_for(split)?;
        let root = config.seed;
        let clean_train = match config.train_sample_size {
            Some(n) => data::sample_balanced_train(&split.train, n, seeds::derive(root, Stream::BalancedSample, 0))?,
            None => split.train.clone(),
        };
        let (corrupted, record) = data::corrupt(
            &clean_train,
            config.corruption_rate,
            seeds::derive(root, Stream::Corruption, 0),
        )?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let cache = EmbeddingCache::new(encoder, clean_train.iter().chain(&split.val).chain(&split.test));
        Ok(Experiment {
            state: ExperimentState {
                current_train: corrupted,
                val: split.val.clone(),
                test: split.test.clone(),
                corruption: record,
                history: Vec::new(),
            },
            config,
            cache,
            clean_train,
            influence: Vec::new(),
        })
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    fn sample_val(&self, stream: Stream, n: usize, iteration: usize) -> Vec<Example> {
        let mut rng = seeds::rng(self.config.seed, stream, iteration as u64);
        let val = &self.state.val;
        index::sample(&mut rng, val.len(), n.min(val.len()))
            .into_iter()
            .map(|i| val[i].clone())
            .collect()
    }

    /// Fresh-init training on `train` with iteration-derived seeds.
    fn train_on(&self, train: &[Example], iteration: usize) -> Result<(PromptHeadParams, Vec<Checkpoint>)> {
        let ckpt_val = self.sample_val(Stream::CheckpointSample, self.config.checkpoint_eval_size, iteration);
        let mut cfg = self.config.train.clone();
        cfg.seed = seeds::derive(self.config.seed, Stream::TrainInit, iteration as u64);
        let train_samples = self.cache.samples(train);
        let val_samples = self.cache.samples(&ckpt_val);
        model::train_embedded(&cfg, &train_samples, &val_samples)
    }

    fn eval_only(&self, train: &[Example], iteration: usize, stage: Stage) -> Result<IterationReport> {
        let (params, checkpoints) = self.train_on(train, iteration)?;
        Ok(IterationReport {
            iteration,
            stage,
            test_ap: test_ap(&params, &self.state.test, &self.cache)?,
            selected_ids: Vec::new(),
            hit_fraction: 0.0,
            checkpoint_epoch: model::select_best(&checkpoints).epoch,
            misclassified_count: 0,
            train_size: train.len(),
            recovered_fraction: self.state.recovered_fraction(),
        })
    }

    /// Train on the clean (pre-corruption) training set; report iteration 0.
    ///
    /// Uses the seeds of iteration 1, so clean and corrupted AP differ only
    /// through the labels.
    pub fn run_clean(&mut self) -> Result<IterationReport> {
        let mut report = self
            .eval_only(&self.clean_train, 1, Stage::Clean)
            .map_err(|e| with_iteration(0, e))?;
        report.iteration = 0;
        report.recovered_fraction = 0.0;
        self.state.history.push(report.clone());
        Ok(report)
    }

    /// One recovery iteration (`iteration >= 1`).
    pub fn run_iteration(&mut self, iteration: usize) -> Result<IterationReport> {
        self.recovery_step(iteration).map_err(|e| with_iteration(iteration, e))
    }

    fn recovery_step(&mut self, iteration: usize) -> Result<IterationReport> {
        let (params, checkpoints) = self.train_on(&self.state.current_train, iteration)?;
        let best = model::select_best(&checkpoints).clone();
        let v_i = self.sample_val(Stream::ValidationSample, self.config.val_subset_size, iteration);
        let misclassified = get_misclassified(&params, &v_i, &self.cache)?;
        let influence_checkpoints = match self.config.checkpoints {
            CheckpointSet::Best => vec![best.clone()],
            CheckpointSet::All => checkpoints,
        };
        let selection = select_examples(
            self.config.method,
            &SelectionInput {
                train: &self.state.current_train,
                misclassified: &misclassified,
                checkpoints: &influence_checkpoints,
                cache: &self.cache,
                iteration,
            },
            &self.config,
        )?;
        let ap = test_ap(&params, &self.state.test, &self.cache)?;
        let hit_fraction = metrics::hit_fraction(&selection.ids, &self.state.corruption.corrupted_ids);

        if self.config.store_influence {
            self.log_influence(iteration, &misclassified, &selection.retrievals);
        }
        apply_intervention(&mut self.state.current_train, &selection.ids, self.config.intervention)?;

        let report = IterationReport {
            iteration,
            stage: Stage::Recovery,
            test_ap: ap,
            selected_ids: selection.ids,
            hit_fraction,
            checkpoint_epoch: best.epoch,
            misclassified_count: misclassified.len(),
            train_size: self.state.current_train.len(),
            recovered_fraction: self.state.recovered_fraction(),
        };
        self.state.history.push(report.clone());
        Ok(report)
    }

    fn log_influence(
        &mut self,
        iteration: usize,
        misclassified: &[(Example, f64)],
        retrievals: &[Vec<InfluenceRecord>],
    ) {
        let by_id: HashMap<&str, &Example> = self.state.current_train.iter().map(|e| (e.id.as_str(), e)).collect();
        for ((ex, p), recs) in misclassified.iter().zip(retrievals) {
            self.influence.push(InfluenceEntry {
                iteration,
                val_id: ex.id.clone(),
                val_text: ex.text.clone(),
                val_label: ex.label,
                prediction: *p,
                measure: recs.first().map_or(self.config.measure, |r| r.measure),
                checkpoint_epochs: recs.first().map(|r| r.checkpoint_epochs.clone()).unwrap_or_default(),
                retrieved: recs
                    .iter()
                    .map(|r| {
                        let t = by_id[r.train_id.as_str()];
                        RetrievedExample {
                            train_id: r.train_id.clone(),
                            text: t.text.clone(),
                            label: t.label,
                            score: r.score,
                        }
                    })
                    .collect(),
            });
        }
    }

    /// Evaluate the training set left after the last intervention.
    pub fn run_final(&mut self) -> Result<IterationReport> {
        let iteration = self.config.n_iterations + 1;
        let report = self
            .eval_only(&self.state.current_train, iteration, Stage::Final)
            .map_err(|e| with_iteration(iteration, e))?;
        self.state.history.push(report.clone());
        Ok(report)
    }

    pub fn run(mut self) -> Result<RunOutput> {
        self.run_clean()?;
        for i in 1..=self.config.n_iterations {
            let r = self.run_iteration(i)?;
            log::debug!(
                "seed {} iteration {i}: ap={:.4} hit={:.3} misclassified={}",
                self.config.seed,
                r.test_ap,
                r.hit_fraction,
                r.misclassified_count
            );
        }
        self.run_final()?;
        Ok(RunOutput {
            config: self.config,
            reports: self.state.history,
            corruption: self.state.corruption,
            influence: self.influence,
        })
    }
}

fn with_iteration(iteration: usize, e: Error) -> Error {
    match e {
        Error::Iteration { .. } => e,
        other => Error::Iteration {
            iteration,
            source: Box::new(other),
        },
    }
}

/// Corrupt, record clean and corrupted AP, then run the recovery loop.
pub fn run_experiment(config: &ExperimentConfig, split: &DatasetSplit) -> Result<RunOutput> {
    Experiment::new(config.clone(), split)?.run()
}
