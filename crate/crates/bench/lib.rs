//! Shared fixtures for the benchmarks.

use querylabel::classifier::{Classifier, ClassifierModel};
use querylabel::features::EncoderSpec;
use querylabel::synth::{SynthConfig, SynthQuery, SynthWorld};
use querylabel::EntityRegistry;

pub struct Fixture {
    pub registry: EntityRegistry,
    pub world: SynthWorld,
    pub queries: Vec<SynthQuery>,
}

pub fn fixture(n: usize) -> Fixture {
    let registry = EntityRegistry::shipped();
    let world = SynthWorld::generate(&registry, &SynthConfig::default()).expect("world");
    let queries = world.queries(n, 1).expect("queries");
    Fixture {
        registry,
        world,
        queries,
    }
}

/// Untrained classifier; inference cost does not depend on the weights.
pub fn classifier(registry: &EntityRegistry, dim: usize, hidden: usize) -> Classifier {
    let model = ClassifierModel::init(registry, EncoderSpec::hashed(dim), hidden, 0).expect("model");
    Classifier::new(model, registry).expect("classifier")
}
