//! Attack success with each component removed, and across batch sizes.
//!
//! cargo run --release --example ablation_sweep

use vlattack::backend::ToyBackend;
use vlattack::config::CliConfig;
use vlattack::fixture::{make_fixture, FixtureSpec};
use vlattack::pipeline::{attack_dataset, eval_options};
use vlattack::retrieval::RetrievalReport;
use vlattack::{Ablation, AttackConfig};

fn cells(r: &RetrievalReport) -> String {
    let f = |m: &vlattack::retrieval::TaskMetrics| m.asr.values().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    format!("TR {}  IR {}", f(&r.tr), f(&r.ir))
}

fn main() -> vlattack::Result<()> {
    let dir = std::env::temp_dir().join("vlattack-ablation");
    make_fixture(&dir, &FixtureSpec::default())?;
    let cfg = CliConfig::load(Some(&dir.join("config.toml")), &[])?;
    let lexicon = cfg.lexicon()?;
    let manifest = cfg.dataset.clone().expect("fixture config names a dataset");
    let surrogate = ToyBackend::seeded(0);
    let run = |config: &AttackConfig| {
        attack_dataset(&manifest, &surrogate, &surrogate, &lexicon, config, &eval_options(config, true, true))
            .map(|(_, r)| r)
    };

    println!("ASR at k = 1, 5, 10");
    println!("{:<8} {}", "full", cells(&run(&cfg.attack)?));
    for a in Ablation::ALL {
        println!("{:<8} {}", a.name(), cells(&run(&cfg.attack.clone().with_ablation(a))?));
    }
    for b in [4, 8, 16] {
        let config = AttackConfig {
            batch_size: b,
            ..cfg.attack.clone()
        };
        println!("B = {b:<4} {}", cells(&run(&config)?));
    }
    Ok(())
}
