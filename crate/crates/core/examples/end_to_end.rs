//! Generates the synthetic fixture, attacks it on one toy model and scores
//! the result on another.
//!
//! cargo run --release --example end_to_end

use vlattack::backend::ToyBackend;
use vlattack::config::CliConfig;
use vlattack::fixture::{make_fixture, FixtureSpec};
use vlattack::pipeline::{attack_dataset, eval_options};

fn main() -> vlattack::Result<()> {
    let dir = std::env::temp_dir().join("vlattack-end-to-end");
    make_fixture(&dir, &FixtureSpec::default())?;
    let cfg = CliConfig::load(Some(&dir.join("config.toml")), &[])?;
    let lexicon = cfg.lexicon()?;
    let surrogate = ToyBackend::seeded(0);
    let victim = ToyBackend::seeded(1);
    let eval = eval_options(&cfg.attack, true, true);
    let manifest = cfg.dataset.clone().expect("fixture config names a dataset");

    let (records, report) = attack_dataset(&manifest, &surrogate, &surrogate, &lexicon, &cfg.attack, &eval)?;
    println!("white-box ({} records)", records.len());
    print!("{}", vlattack::cli::summary_table(&report));
    for r in records.iter().take(3) {
        println!("  {} -> {}", r.original_text.raw(), r.adversarial_text.raw());
    }

    let (_, report) = attack_dataset(&manifest, &surrogate, &victim, &lexicon, &cfg.attack, &eval)?;
    println!("transfer to toy-1");
    print!("{}", vlattack::cli::summary_table(&report));
    Ok(())
}
