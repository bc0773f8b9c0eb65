//! End-to-end run on a synthetic domain pair: train a source classifier, measure
//! the accuracy drop on the shifted target, then train a generator and measure
//! how much of the gap it recovers.
//!
//! cargo run --release --example synthetic_demo -- [shift] [n_per_class] [image_size] [gen_epochs]

use std::time::Instant;

use sourcefree::data::{ShiftKind, Split, SyntheticSpec};
use sourcefree::evaluation::evaluate;
use sourcefree::models::{ClassifierConfig, GeneratorConfig};
use sourcefree::training::{train_generator, train_source, TrainConfig};

fn main() -> sourcefree::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let shift: ShiftKind = arg(0, "color_tint").parse()?;
    let n_per_class: usize = arg(1, "100").parse().expect("n_per_class");
    let image_size: usize = arg(2, "16").parse().expect("image_size");
    let gen_epochs: usize = arg(3, "5").parse().expect("gen_epochs");

    let spec = SyntheticSpec {
        image_size,
        ..SyntheticSpec::new(0, n_per_class, shift)
    };
    let train = spec.pair(Split::Train)?;
    let test = spec.pair(Split::Test)?;

    let arch = ClassifierConfig {
        image_size,
        ..ClassifierConfig::small()
    };
    let t = Instant::now();
    let src_cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::source_defaults()
    };
    let model = train_source(&train.source, &arch, &src_cfg)?;
    println!("source training: {:.1}s", t.elapsed().as_secs_f64());

    let source_acc = evaluate(&model, None, &test.source)?.accuracy;
    let target_acc = evaluate(&model, None, &test.target)?.accuracy;
    println!(
        "source test {:.2}%  target test (no DA) {:.2}%",
        100.0 * source_acc,
        100.0 * target_acc
    );

    let t = Instant::now();
    let gen_cfg = TrainConfig {
        epochs: gen_epochs,
        batch_size: 32,
        lr: 1e-3,
        ..TrainConfig::generator_defaults()
    };
    let run = train_generator(&train.target, &model, &GeneratorConfig::small(), &gen_cfg)?;
    println!(
        "generator training: {:.1}s ({} steps)",
        t.elapsed().as_secs_f64(),
        run.steps.len()
    );
    let translated = evaluate(&model, Some(&run.generator), &test.target)?.accuracy;
    let gap = source_acc - target_acc;
    println!(
        "target test (translated) {:.2}%  recovered {:.0}% of the gap",
        100.0 * translated,
        100.0 * (translated - target_acc) / gap.max(1e-9)
    );
    Ok(())
}
