//! Shared fixtures for the benchmarks.

use gbair_core::data::generate_synthetic;
use gbair_core::model::{self, Checkpoint};
use gbair_core::seeds::{self, Stream};
use gbair_core::{DatasetSplit, Encoder, EncoderConfig, Label, PromptHeadParams, SyntheticConfig, TrainConfig};

pub struct Fixture {
    pub split: DatasetSplit,
    pub encoder: Encoder,
    /// Train embeddings with their labels.
    pub train: Vec<(Vec<f64>, Label)>,
    pub val: Vec<(Vec<f64>, Label)>,
    pub params: PromptHeadParams,
}

pub fn fixture(n_train: usize) -> Fixture {
    let split = generate_synthetic(&SyntheticConfig {
        n_train,
        n_val: 500,
        n_test: 500,
        ..Default::default()
    })
    .expect("synthetic split");
    let encoder = Encoder::new(EncoderConfig::default()).expect("encoder");
    let embed = |xs: &[gbair_core::Example]| -> Vec<(Vec<f64>, Label)> {
        xs.iter().map(|e| (encoder.embed_text(&e.text).0, e.label)).collect()
    };
    let train = embed(&split.train);
    let val = embed(&split.val);
    let config = TrainConfig::default();
    let mut rng = seeds::rng(0, Stream::TrainInit, 0);
    let params = PromptHeadParams::init(config.prompt_tokens, encoder.dim(), 0.5, &mut rng);
    Fixture {
        split,
        encoder,
        train,
        val,
        params,
    }
}

pub fn samples(xs: &[(Vec<f64>, Label)]) -> Vec<model::Sample<'_>> {
    xs.iter().map(|(e, y)| (e.as_slice(), *y)).collect()
}

pub fn checkpoint(f: &Fixture) -> Checkpoint {
    Checkpoint {
        epoch: 1,
        val_loss: 0.0,
        params: f.params.clone(),
    }
}
