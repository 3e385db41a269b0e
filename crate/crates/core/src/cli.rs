//! Command-line front end. Every subcommand is also callable as a function.
//!
//! Setting precedence: config file, then `--set` overrides in order, then the
//! dedicated flags (`--seed`, `--out`, `--backend`).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{layer_diagnostics, Backend, BackendDescriptor, LayerDiagnosticRow};
use crate::config::{BackendSpec, CliConfig};
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::fixture::{make_fixture, FixtureSpec};
use crate::pipeline::{attack_groups, load_run_pairs, pair_sets, sha256_file, write_report, RunManifest, RunWriter};
use crate::plot::{bar_chart, line_chart};
use crate::retrieval::{evaluate, similarity_gap, PairSet, RetrievalReport, SimilarityGap};

#[derive(Debug, Parser)]
#[command(name = "vlattack", version, about = "Transfer attacks on image-text retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set budget.epsilon_v=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backend: toy[:SEED], toy-identity[:SEED] or weights:PATH.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attack a dataset on the surrogate and score it on the victim.
    Attack(CommonArgs),
    /// Re-score an existing run against a (different) victim given by --backend.
    Evaluate {
        /// Run directory written by `attack`.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Per-layer [CLS] similarity and layer-skip curves for one image.
    DiagnoseLayers {
        /// Image id from the dataset (default: first image).
        #[arg(long)]
        image: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Mean matched/unmatched cosine for clean and adversarial pairs.
    GapPlot {
        /// Run directory (or its records.jsonl); omitted: clean dataset only.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic dataset for the toy backend.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

enum BackendRole {
    Surrogate,
    Victim,
}

fn resolve(common: &CommonArgs, role: BackendRole, need_dataset: bool) -> Result<CliConfig> {
    let table = CliConfig::load_table(common.config.as_deref(), &common.set)?;
    let (mut cfg, mut problems) = CliConfig::from_table_lenient(table);
    if let Some(seed) = common.seed {
        cfg.attack.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(b) = &common.backend {
        match b.parse::<BackendSpec>() {
            Ok(spec) => match role {
                BackendRole::Surrogate => cfg.surrogate = spec,
                BackendRole::Victim => cfg.victim = Some(spec),
            },
            Err(e) => problems.push(format!("--backend: {e}")),
        }
    }
    problems.extend(cfg.missing_inputs(need_dataset));
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

fn out_dir(out: Option<&PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = out.cloned().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Replay record for the non-attack subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub backend: BackendDescriptor,
    /// `(path, sha256)` of every input file read.
    pub inputs: Vec<(PathBuf, String)>,
}

fn write_command_manifest(dir: &Path, command: &str, cfg: &CliConfig, backend: &dyn Backend, inputs: &[PathBuf]) -> Result<()> {
    let manifest = CommandManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.to_json(),
        backend: backend.descriptor().clone(),
        inputs: inputs
            .iter()
            .map(|p| Ok((p.clone(), sha256_file(p)?)))
            .collect::<Result<_>>()?,
    };
    write_file(&dir.join("command.json"), serde_json::to_string_pretty(&manifest)? + "\n")
}

static INTERRUPT: AtomicBool = AtomicBool::new(false);
static HANDLER: Once = Once::new();

fn interrupt_flag() -> &'static AtomicBool {
    HANDLER.call_once(|| {
        if let Err(e) = ctrlc::set_handler(|| INTERRUPT.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install Ctrl-C handler: {e}");
        }
    });
    &INTERRUPT
}

/// Fixed-width TR/IR table of recall and ASR per k.
pub fn summary_table(report: &RetrievalReport) -> String {
    let mut s = String::from("task  k    R@k pre  R@k post  ASR      counted\n");
    for (name, m) in [("TR", &report.tr), ("IR", &report.ir)] {
        for k in &report.top_k {
            s.push_str(&format!(
                "{name:<4}  {k:<3}  {:<7.4}  {:<8.4}  {:<7.4}  {}\n",
                m.recall_pre[k], m.recall_post[k], m.asr[k], m.evaluated[k]
            ));
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: Option<RetrievalReport>,
}

pub fn cmd_attack(common: &CommonArgs) -> Result<AttackOutcome> {
    let cfg = resolve(common, BackendRole::Surrogate, true)?;
    let dataset = cfg.dataset.clone().expect("checked above");
    let surrogate = cfg.surrogate.build()?;
    let victim_owned = cfg.victim.as_ref().map(BackendSpec::build).transpose()?;
    let victim: &dyn Backend = victim_owned.as_deref().unwrap_or(&*surrogate);
    let lexicon = cfg.lexicon()?;
    let groups = load_dataset(&dataset, cfg.attack.m_captions)?;
    let dir = out_dir(cfg.out.as_ref(), "runs/default")?;
    let manifest = RunManifest::new(cfg.to_json(), &cfg.attack, &*surrogate, victim, &dataset, &dir)?;
    let mut writer = RunWriter::create(&dir, manifest, &groups, cfg.export_png)?;
    let run = attack_groups(&groups, &*surrogate, &lexicon, &cfg.attack, Some(interrupt_flag()), |records| {
        writer.append(records)
    })?;
    let report = if run.records.is_empty() {
        None
    } else {
        let (clean, adv) = pair_sets(&groups, &run.records)?;
        Some(evaluate(&clean, &adv, victim, &cfg.eval_options())?)
    };
    let manifest = writer.finish(report.as_ref(), run.truncated)?;
    if let Some(r) = &report {
        print!("{}", summary_table(r));
    }
    println!("wrote {} records to {}", manifest.records, dir.display());
    if run.truncated {
        return Err(Error::Interrupted);
    }
    Ok(AttackOutcome { dir, manifest, report })
}

pub fn cmd_evaluate(run: &Path, common: &CommonArgs) -> Result<RetrievalReport> {
    let cfg = resolve(common, BackendRole::Victim, false)?;
    let victim = cfg.victim_spec().build()?;
    let (clean, adv) = load_run_pairs(run)?;
    let report = evaluate(&clean, &adv, &*victim, &cfg.eval_options())?;
    // the configured `out` is the attack run itself; only --out redirects
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => run.join("eval").join(&victim.descriptor().name),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_report(&dir, &report)?;
    write_command_manifest(&dir, "evaluate", &cfg, &*victim, &[run.join("records.jsonl")])?;
    print!("{}", summary_table(&report));
    Ok(report)
}

pub fn layers_csv(rows: &[LayerDiagnosticRow]) -> String {
    let mut s = String::from("layer,cls_similarity,skip_similarity\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.layer, r.cls_similarity, r.skip_similarity));
    }
    s
}

pub fn cmd_diagnose_layers(image: Option<&str>, common: &CommonArgs) -> Result<Vec<LayerDiagnosticRow>> {
    let cfg = resolve(common, BackendRole::Surrogate, true)?;
    let backend = cfg.surrogate.build()?;
    if !backend.descriptor().supports_layer_skip {
        return Err(Error::Capability {
            backend: backend.descriptor().name.clone(),
            capability: "layer skipping".into(),
        });
    }
    let dataset = cfg.dataset.clone().expect("checked above");
    let groups = load_dataset(&dataset, 1)?;
    let group = match image {
        None => groups.first(),
        Some(id) => groups.iter().find(|g| g.image.id() == id),
    }
    .ok_or_else(|| Error::InvalidInput(format!("image `{}` not in {}", image.unwrap_or("<first>"), dataset.display())))?;
    let rows = layer_diagnostics(&*backend, &group.image)?;
    let dir = out_dir(common.out.as_ref(), "runs/diagnose")?;
    write_file(&dir.join("layers.csv"), layers_csv(&rows))?;
    let xs: Vec<String> = rows.iter().map(|r| r.layer.to_string()).collect();
    let svg = line_chart(
        &format!("[CLS] similarity to top layer, image {}", group.image.id()),
        "layer",
        "cosine",
        &xs,
        &[
            ("[CLS] vs top layer", rows.iter().map(|r| r.cls_similarity).collect()),
            ("top feature with layer skipped", rows.iter().map(|r| r.skip_similarity).collect()),
        ],
    );
    write_file(&dir.join("layers.svg"), svg)?;
    write_command_manifest(&dir, "diagnose-layers", &cfg, &*backend, &[dataset])?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub backend: String,
    pub clean: SimilarityGap,
    pub adversarial: Option<SimilarityGap>,
}

fn clean_pairs(groups: &[crate::types::ImageTextGroup]) -> PairSet {
    PairSet {
        images: groups.iter().map(|g| g.image.clone()).collect(),
        captions: groups
            .iter()
            .flat_map(|g| g.captions.iter().map(|c| (c.clone(), g.image.id().to_string())))
            .collect(),
    }
}

pub fn cmd_gap_plot(records: Option<&Path>, common: &CommonArgs) -> Result<GapSummary> {
    let cfg = resolve(common, BackendRole::Surrogate, records.is_none())?;
    let backend = cfg.surrogate.build()?;
    let (clean, adv, input) = match records {
        Some(p) => {
            let dir = if p.is_dir() { p } else { p.parent().unwrap_or(Path::new(".")) };
            let (clean, adv) = load_run_pairs(dir)?;
            (clean, Some(adv), dir.join("records.jsonl"))
        }
        None => {
            let dataset = cfg.dataset.clone().expect("checked above");
            (clean_pairs(&load_dataset(&dataset, cfg.attack.m_captions)?), None, dataset)
        }
    };
    let summary = GapSummary {
        backend: backend.descriptor().name.clone(),
        clean: similarity_gap(&clean, &*backend)?,
        adversarial: adv.as_ref().map(|a| similarity_gap(a, &*backend)).transpose()?,
    };
    let dir = out_dir(common.out.as_ref(), "runs/gap")?;
    write_file(&dir.join("gap.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut groups = vec![("clean".to_string(), vec![summary.clean.mean_positive, summary.clean.mean_negative])];
    if let Some(a) = &summary.adversarial {
        groups.push(("adversarial".to_string(), vec![a.mean_positive, a.mean_negative]));
    }
    let svg = bar_chart(
        "Mean image-text cosine",
        "cosine",
        &["matched pairs", "unmatched pairs"],
        &groups,
    );
    write_file(&dir.join("gap.svg"), svg)?;
    write_command_manifest(&dir, "gap-plot", &cfg, &*backend, &[input])?;
    Ok(summary)
}

pub fn cmd_make_fixture(out: &Path, size: usize, seed: u64) -> Result<()> {
    make_fixture(out, &FixtureSpec { size, seed })?;
    println!("wrote {size}-image fixture to {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack(common) => cmd_attack(&common).map(|_| ()),
        Command::Evaluate { run, common } => cmd_evaluate(&run, &common).map(|_| ()),
        Command::DiagnoseLayers { image, common } => cmd_diagnose_layers(image.as_deref(), &common).map(|_| ()),
        Command::GapPlot { records, common } => cmd_gap_plot(records.as_deref(), &common).map(|_| ()),
        Command::MakeFixture { out, size, seed } => cmd_make_fixture(&out, size, seed),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Error::Interrupted) => {
            eprintln!("interrupted; partial records kept with a truncation marker");
            130
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
