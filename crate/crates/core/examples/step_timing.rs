//! Wall-clock cost of one training step and one evaluation batch per model.
//!
//! `cargo run --release -p smagnet --example step_timing`

use std::time::Instant;

use smagnet::data::{Dataset, GenParams};
use smagnet::model::{Model, ModelConfig, ModelKind};
use smagnet::optim::Adam;
use smagnet::train::{evaluate_losses, train_step};

const STEPS: u32 = 5;

fn main() -> smagnet::Result<()> {
    let start = Instant::now();
    let ds = Dataset::generate(&GenParams { seed: 1, ..GenParams::default() }, 40)?;
    println!("generated 40 scenes in {:?}", start.elapsed());
    let batch: Vec<_> = ds.split("train")?[..8].to_vec();
    for kind in [ModelKind::Smagnet, ModelKind::UnetSar, ModelKind::UnetConcat] {
        let mut model = Model::<f32>::new(ModelConfig { kind, ..ModelConfig::default() }, 3)?;
        let mut opt = Adam::new(model.store.values(), 5e-4, 0.0);
        let start = Instant::now();
        for _ in 0..STEPS {
            train_step(&mut model, &mut opt, &batch, &ds.stats, 0.5)?;
        }
        let step = start.elapsed() / STEPS;
        let start = Instant::now();
        evaluate_losses(&model, &batch, &ds.stats, 8, 0.5)?;
        println!(
            "{kind:?}: {} parameters, train step {step:?}, eval batch {:?}",
            model.store.scalar_count(),
            start.elapsed()
        );
    }
    Ok(())
}
