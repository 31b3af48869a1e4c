//! Labeled examples, dataset files, balanced sampling and label corruption.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary safety label. `NotOk` (offensive) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ok,
    NotOk,
}

impl Label {
    pub fn flip(self) -> Label {
        match self {
            Label::Ok => Label::NotOk,
            Label::NotOk => Label::Ok,
        }
    }

    /// Regression target: 1.0 for the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Ok => 0.0,
            Label::NotOk => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::NotOk
    }

    /// Hard label for a positive-class probability, thresholded at 0.5.
    pub fn from_probability(p: f64) -> Label {
        if p >= 0.5 {
            Label::NotOk
        } else {
            Label::Ok
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ok => "ok",
            Label::NotOk => "notok",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled text with its corruption provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub original_label: Label,
    pub corrupted: bool,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            label,
            original_label: label,
            corrupted: false,
        }
    }

    /// Swap the current label and refresh the corruption flag.
    pub fn flip_label(&mut self) {
        self.label = self.label.flip();
        self.corrupted = self.label != self.original_label;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSplit {
    /// Checks id uniqueness across all splits and that evaluation data is clean.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for ex in part {
                if !seen.insert(ex.id.as_str()) {
                    return Err(Error::Validation(format!("duplicate id `{}` (in {name} split)", ex.id)));
                }
                if name != "train" && ex.corrupted {
                    return Err(Error::Validation(format!(
                        "{name} example `{}` is marked corrupted",
                        ex.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub corrupted_ids: BTreeSet<String>,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    text: String,
    label: Label,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

/// Parse one JSON-lines file in the canonical `{"id","text","label"}` format.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate id `{}`",
                path.display(),
                i + 1,
                record.id
            )));
        }
        out.push(Example::new(record.id, record.text, record.label));
    }
    Ok(out)
}

/// Load `train.jsonl`, `val.jsonl` and `test.jsonl` from `dir`.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let split = DatasetSplit {
        train: load_jsonl(&dir.join(SPLIT_FILES[0]))?,
        val: load_jsonl(&dir.join(SPLIT_FILES[1]))?,
        test: load_jsonl(&dir.join(SPLIT_FILES[2]))?,
    };
    split.validate()?;
    Ok(split)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        let record = Record {
            id: ex.id.clone(),
            text: ex.text.clone(),
            label: ex.label,
        };
        serde_json::to_writer(&mut buf, &record)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Write the split in the canonical format. Provenance fields are not persisted.
pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(SPLIT_FILES[0]), &split.train)?;
    write_jsonl(&dir.join(SPLIT_FILES[1]), &split.val)?;
    write_jsonl(&dir.join(SPLIT_FILES[2]), &split.test)
}

/// Draw `n / 2` examples of each class uniformly without replacement.
pub fn sample_balanced_train(pool: &[Example], n: usize, seed: u64) -> Result<Vec<Example>> {
    if !n.is_multiple_of(2) {
        return Err(Error::Validation(format!("balanced sample size must be even, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for class in [Label::Ok, Label::NotOk] {
        let members: Vec<&Example> = pool.iter().filter(|e| e.label == class).collect();
        if members.len() < n / 2 {
            return Err(Error::Capacity {
                class: class.to_string(),
                requested: n / 2,
                available: members.len(),
            });
        }
        for i in index::sample(&mut rng, members.len(), n / 2) {
            out.push(members[i].clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Number of labels flipped for a given rate: `round(rate * n)`.
pub fn corruption_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).min(n)
}

/// Flip exactly `round(rate * |train|)` labels chosen uniformly without replacement.
pub fn corrupt(train: &[Example], rate: f64, seed: u64) -> Result<(Vec<Example>, CorruptionRecord)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(
            "corruption_rate",
            format!("must lie in [0, 1], got {rate}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = corruption_count(rate, train.len());
    let mut out = train.to_vec();
    let mut corrupted_ids = BTreeSet::new();
    for i in index::sample(&mut rng, train.len(), count) {
        let ex = &mut out[i];
        ex.label = ex.label.flip();
        ex.corrupted = ex.label != ex.original_label;
        corrupted_ids.insert(ex.id.clone());
    }
    Ok((
        out,
        CorruptionRecord {
            corrupted_ids,
            rate,
            seed,
        },
    ))
}

/// Parameters of the synthetic two-class text generator.
///
/// Each class owns `topics_per_class` topics with `words_per_topic` pseudo-words
/// each. A text picks one topic of its class and draws `topic_tokens` words;
/// each word comes from the other class's vocabulary with probability
/// `noise / 2`, so `noise = 1` makes texts class-uninformative. `filler_tokens`
/// words from a shared filler vocabulary are mixed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
    /// Share of positives in the train split.
    pub train_positive_rate: f64,
    /// Share of positives in val and test.
    pub eval_positive_rate: f64,
    pub topics_per_class: usize,
    pub words_per_topic: usize,
    pub topic_tokens: usize,
    pub filler_vocab: usize,
    pub filler_tokens: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 1000,
            n_val: 1000,
            n_test: 1000,
            noise: 0.0,
            seed: 0,
            train_positive_rate: 0.5,
            eval_positive_rate: 0.1,
            topics_per_class: 16,
            words_per_topic: 3,
            topic_tokens: 8,
            filler_vocab: 300,
            filler_tokens: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("synthetic.n_train", self.n_train),
            ("synthetic.n_val", self.n_val),
            ("synthetic.n_test", self.n_test),
            ("synthetic.topics_per_class", self.topics_per_class),
            ("synthetic.words_per_topic", self.words_per_topic),
            ("synthetic.topic_tokens", self.topic_tokens),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("synthetic.noise", self.noise),
            ("synthetic.train_positive_rate", self.train_positive_rate),
            ("synthetic.eval_positive_rate", self.eval_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.filler_tokens > 0 && self.filler_vocab == 0 {
            return Err(Error::invalid(
                "synthetic.filler_vocab",
                "must be positive when filler_tokens > 0",
            ));
        }
        Ok(())
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

struct Vocabulary {
    /// `topics[class][topic]` is a list of words.
    topics: [Vec<Vec<String>>; 2],
    filler: Vec<String>,
}

impl Vocabulary {
    fn build(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut taken = HashSet::new();
        let mut class_topics = |rng: &mut ChaCha8Rng| -> Vec<Vec<String>> {
            (0..cfg.topics_per_class)
                .map(|_| (0..cfg.words_per_topic).map(|_| pseudo_word(rng, &mut taken)).collect())
                .collect()
        };
        let ok = class_topics(rng);
        let notok = class_topics(rng);
        let filler = (0..cfg.filler_vocab).map(|_| pseudo_word(rng, &mut taken)).collect();
        Vocabulary {
            topics: [ok, notok],
            filler,
        }
    }

    fn text(&self, cfg: &SyntheticConfig, class: Label, rng: &mut ChaCha8Rng) -> String {
        let own = class as usize;
        let topic = rng.random_range(0..cfg.topics_per_class);
        let mut words: Vec<&str> = Vec::with_capacity(cfg.topic_tokens + cfg.filler_tokens);
        for _ in 0..cfg.topic_tokens {
            let (c, t) = if rng.random::<f64>() < cfg.noise / 2.0 {
                (1 - own, rng.random_range(0..cfg.topics_per_class))
            } else {
                (own, topic)
            };
            let vocab = &self.topics[c][t];
            words.push(&vocab[rng.random_range(0..vocab.len())]);
        }
        for _ in 0..cfg.filler_tokens {
            words.push(&self.filler[rng.random_range(0..self.filler.len())]);
        }
        words.shuffle(rng);
        words.join(" ")
    }
}

fn synth_part(
    vocab: &Vocabulary,
    cfg: &SyntheticConfig,
    prefix: &str,
    n: usize,
    positive_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    let n_pos = (positive_rate * n as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_pos { Label::NotOk } else { Label::Ok })
        .collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| Example::new(format!("{prefix}-{i:05}"), vocab.text(cfg, label, rng), label))
        .collect()
}

/// Generate a seeded two-class text dataset.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = crate::seeds::rng(cfg.seed, crate::seeds::Stream::Synthetic, 0);
    let vocab = Vocabulary::build(cfg, &mut rng);
    let split = DatasetSplit {
        train: synth_part(&vocab, cfg, "train", cfg.n_train, cfg.train_positive_rate, &mut rng),
        val: synth_part(&vocab, cfg, "val", cfg.n_val, cfg.eval_positive_rate, &mut rng),
        test: synth_part(&vocab, cfg, "test", cfg.n_test, cfg.eval_positive_rate, &mut rng),
    };
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(ok: usize, notok: usize) -> Vec<Example> {
        (0..ok)
            .map(|i| Example::new(format!("ok{i}"), "x", Label::Ok))
            .chain((0..notok).map(|i| Example::new(format!("no{i}"), "y", Label::NotOk)))
            .collect()
    }

    #[test]
    fn loads_single_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("train.jsonl"),
            "{\"id\":\"a\",\"text\":\"hi\",\"label\":\"ok\"}\n",
        )
        .unwrap();
        fs::write(dir.path().join("val.jsonl"), "").unwrap();
        fs::write(dir.path().join("test.jsonl"), "").unwrap();
        let split = load_dataset(dir.path()).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].label, Label::Ok);
        assert_eq!(split.train[0].original_label, Label::Ok);
        assert!(!split.train[0].corrupted);
    }

    #[test]
    fn empty_train_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        for f in SPLIT_FILES {
            fs::write(dir.path().join(f), "").unwrap();
        }
        let split = load_dataset(dir.path()).unwrap();
        assert!(split.train.is_empty());
    }

    #[test]
    fn unknown_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"hi\",\"label\":\"maybe\"}\n").unwrap();
        match load_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_second_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"hi\",\"label\":\"ok\"}\n{\"id\":\"b\"\n").unwrap();
        match load_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn extra_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"hi\",\"label\":\"ok\",\"x\":1}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = "{\"id\":\"a\",\"text\":\"hi\",\"label\":\"ok\"}\n";
        fs::write(dir.path().join("train.jsonl"), line).unwrap();
        fs::write(dir.path().join("val.jsonl"), line).unwrap();
        fs::write(dir.path().join("test.jsonl"), "").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));

        let p = dir.path().join("dup.jsonl");
        fs::write(&p, format!("{line}{line}")).unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn balanced_sampling() {
        let p = pool(10, 10);
        let s = sample_balanced_train(&p, 4, 3).unwrap();
        assert_eq!(s.iter().filter(|e| e.label == Label::Ok).count(), 2);
        assert_eq!(s.iter().filter(|e| e.label == Label::NotOk).count(), 2);
        assert_eq!(s, sample_balanced_train(&p, 4, 3).unwrap());
        let ids: HashSet<_> = s.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn balanced_sampling_capacity() {
        let p = pool(1, 10);
        assert!(matches!(
            sample_balanced_train(&p, 4, 0),
            Err(Error::Capacity {
                requested: 2,
                available: 1,
                ..
            })
        ));
        assert!(sample_balanced_train(&p, 3, 0).is_err());
    }

    #[test]
    fn zero_rate_is_identity() {
        let p = pool(5, 5);
        let (out, rec) = corrupt(&p, 0.0, 1).unwrap();
        assert_eq!(out, p);
        assert!(rec.corrupted_ids.is_empty());
    }

    #[test]
    fn thirty_percent_of_thousand() {
        let p = pool(500, 500);
        let (out, rec) = corrupt(&p, 0.3, 11).unwrap();
        assert_eq!(rec.corrupted_ids.len(), 300);
        assert_eq!(out.iter().filter(|e| e.corrupted).count(), 300);
        for ex in &out {
            assert_eq!(ex.corrupted, rec.corrupted_ids.contains(&ex.id));
            assert_eq!(ex.corrupted, ex.label != ex.original_label);
        }
    }

    #[test]
    fn flipping_back_restores() {
        let p = pool(30, 30);
        let (mut out, rec) = corrupt(&p, 0.4, 5).unwrap();
        for ex in out.iter_mut().filter(|e| rec.corrupted_ids.contains(&e.id)) {
            ex.flip_label();
        }
        assert!(out.iter().all(|e| e.label == e.original_label && !e.corrupted));
    }

    #[test]
    fn rate_out_of_range() {
        assert!(corrupt(&pool(2, 2), 1.5, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let cfg = SyntheticConfig {
            n_train: 50,
            n_val: 40,
            n_test: 40,
            seed: 9,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.val.iter().filter(|e| e.label.is_positive()).count(), 4);
        assert_eq!(a.train.iter().filter(|e| e.label.is_positive()).count(), 25);
        let c = generate_synthetic(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic(&SyntheticConfig {
            n_train: 20,
            n_val: 10,
            n_test: 10,
            ..Default::default()
        })
        .unwrap();
        save_dataset(dir.path(), &split).unwrap();
        let before: Vec<Vec<u8>> = SPLIT_FILES
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, split);
        let out = tempfile::tempdir().unwrap();
        save_dataset(out.path(), &loaded).unwrap();
        for (f, b) in SPLIT_FILES.iter().zip(&before) {
            assert_eq!(&fs::read(out.path().join(f)).unwrap(), b);
        }
    }
}
