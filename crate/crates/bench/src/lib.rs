//! Shared fixtures for the criterion benches.

use promptclass::experiment::{ToyData, ToyRecipe};
use promptclass::model::prepare;
use promptclass::{EncoderConfig, HeadConfig, LayerRange, Model, PreparedExample, ToyTask, Variant};

pub struct Fixture {
    pub data: ToyData,
    pub model: Model,
    pub prepared: Vec<PreparedExample>,
}

/// Toy corpus with an untrained model of the given shape.
pub fn fixture(encoder: fn(usize) -> EncoderConfig, variant: Variant) -> Fixture {
    let recipe = ToyRecipe::new(ToyTask::Languages);
    let data = recipe.materialize().expect("toy corpus");
    let spec = recipe.spec(&data.vocab);
    let enc = encoder(data.vocab.size());
    let head = HeadConfig {
        variant,
        n_classes: ToyTask::Languages.n_classes(),
        d_model: enc.d_model,
        layers: LayerRange::default_for(enc.n_layers),
        attn_projection: false,
    };
    let max_len = enc.max_len;
    let model = Model::init(enc, head, 1).expect("model");
    let prepared = prepare(&data.vocab, &spec.template, variant, &data.train, max_len).expect("prepare");
    Fixture {
        data,
        model,
        prepared,
    }
}
