//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Array3;
use vlattack::backend::{Backend, ToyBackend, ToyConfig};
use vlattack::cli::{cmd_attack, CommonArgs};
use vlattack::image_attack::{
    build_contrast_sets, layer_importance, pgd_optimize, ContrastiveObjective, Direction, LayerWeights,
    PgdProblem,
};
use vlattack::lexicon::{substitute_set, NoFallback, VectorStore};
use vlattack::pipeline::{attack_dataset, attack_groups, eval_options, pair_sets, partition};
use vlattack::retrieval::{evaluate_features, similarity_gap, EvalOptions, RetrievalReport};
use vlattack::{Ablation, AdversarialRecord, AttackConfig, ImageSample, PairBatch, TextSample};

/// Mean ASR over (task, k) cells of the white-box fixture run for
/// B = 4, 8, 16, recorded from the first computation.
const BATCH_TREND: [f64; 3] = [0.8046875, 0.8177083333333334, 0.8177083333333334];

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn budget_violations(records: &[AdversarialRecord], config: &AttackConfig) -> usize {
    records
        .iter()
        .filter(|r| !(r.linf_distance <= 2.0 / 255.0 + 1e-6 && r.edit_distance <= 1 && r.within_budget(&config.budget)))
        .count()
}

fn mean_asr(r: &RetrievalReport) -> f64 {
    let cells: Vec<f64> = r.tr.asr.values().chain(r.ir.asr.values()).copied().collect();
    cells.iter().sum::<f64>() / cells.len() as f64
}

fn criterion_1(f: &support::Fixture) -> Outcome {
    let backend = ToyBackend::seeded(0);
    let config = AttackConfig::default();
    let start = Instant::now();
    let run = attack_groups(&f.groups, &backend, &f.lexicon, &config, None, |_| Ok(())).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let bad = budget_violations(&run.records, &config);
    let worst = run.records.iter().map(|r| r.linf_distance).fold(0.0, f64::max);
    check(run.records.len() == 64, format!("{} records", run.records.len()))?;
    check(bad == 0, format!("{bad} records over budget"))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} records, 0 over budget, max linf {:.3}/255, {secs:.2}s",
        run.records.len(),
        worst * 255.0
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let backend = ToyBackend::seeded(3);
    let ll = support::layer_loss_gradient_errors(&backend, 1, 24, 1e-5);
    let lc = support::contrastive_gradient_errors(&backend, 9, 24, 1e-5, &AttackConfig::default().scales, -10.0);
    let secs = start.elapsed().as_secs_f64();
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    check(ll.len() >= 20 && lc.len() >= 20, "too few coordinates")?;
    check(max(&ll) < 1e-4, format!("layer loss max rel err {:e}", max(&ll)))?;
    check(max(&lc) < 1e-4, format!("contrastive max rel err {:e}", max(&lc)))?;
    check(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "24+24 coordinates, max rel err {:.1e} (layer) / {:.1e} (contrastive), {secs:.2}s",
        max(&ll),
        max(&lc)
    ))
}

fn criterion_3() -> Outcome {
    let (cases, mismatches, substituted) = support::selection_oracle(2024, 50);
    check(cases == 50, format!("{cases} cases"))?;
    check(mismatches.is_empty(), format!("mismatches in cases {mismatches:?}"))?;
    Ok(format!("{cases} cases, 0 mismatches, {substituted} with a substitution"))
}

fn criterion_4() -> Outcome {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let entries: Vec<(String, Vec<f64>)> = (0..10_000)
        .map(|i| (format!("w{i}"), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let store = VectorStore::from_entries(entries.clone()).map_err(|e| e.to_string())?;
    let mut queries = 0;
    let mut sizes = Vec::new();
    for tau in [-0.5, 0.0, 0.4, 0.9] {
        let mut total = 0;
        for _ in 0..10 {
            let word = &entries[rng.random_range(0..entries.len())].0;
            let text = TextSample::new("t", format!("a {word}")).unwrap();
            let got: std::collections::BTreeSet<String> =
                substitute_set(&store, tau, &NoFallback, 10, &text, 1).into_iter().collect();
            let want = support::brute_substitutes(&entries, word, tau);
            check(got == want, format!("tau {tau}, word {word}: {} vs {}", got.len(), want.len()))?;
            total += want.len();
            queries += 1;
        }
        sizes.push(total / 10);
    }
    Ok(format!("{queries} queries on 10^4 entries, mean set sizes {sizes:?} for tau -0.5/0/0.4/0.9"))
}

fn criterion_5() -> Outcome {
    let backend = ToyBackend::seeded(0);
    for seed in 0..100 {
        let img = ImageSample::from_f64("i", &support::random_image(seed, (8, 8, 3))).unwrap();
        let w = layer_importance(&img, &backend).map_err(|e| e.to_string())?;
        check(*w.as_slice().last().unwrap() == 1.0, format!("image {seed}: top weight {:?}", w.as_slice().last()))?;
        check(w.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)), format!("image {seed}: {:?}", w.as_slice()))?;
    }
    let identity = ToyBackend::new(ToyConfig {
        identity_layers: true,
        ..ToyConfig::default()
    })
    .map_err(|e| e.to_string())?;
    for seed in 0..10 {
        let img = ImageSample::from_f64("i", &support::random_image(seed, (8, 8, 3))).unwrap();
        let w = layer_importance(&img, &identity).map_err(|e| e.to_string())?;
        check(w == LayerWeights::ones(3), format!("identity backend: {:?}", w.as_slice()))?;
    }
    Ok("100 images: top weight exactly 1, all in [-1, 1]; identity backend all ones".into())
}

fn quadratic_pgd(init: f64, eps: f64, steps: usize) -> (f64, Vec<f64>) {
    let problem = PgdProblem {
        init: Array3::from_elem((1, 1, 1), init),
        center: Array3::from_elem((1, 1, 1), 0.5),
        epsilon: eps,
        alpha: 0.1,
        steps,
        direction: Direction::Descend,
    };
    let out = pgd_optimize(&problem, |x| Ok((x[[0, 0, 0]].powi(2), x.mapv(|v| 2.0 * v)))).unwrap();
    (out.image[[0, 0, 0]], out.loss_trace)
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..=10 {
        let (x, trace) = quadratic_pgd(0.9, 0.3, k);
        let closed = if k == 0 { 0.9 } else { (0.9 - 0.1 * k as f64).max(0.2) };
        worst = worst.max((x - closed).abs());
        let oracle = support::quadratic_pgd(0.9, 0.5, 0.0, 0.3, 0.1, k);
        for (t, o) in trace.iter().zip(&oracle) {
            worst = worst.max((t - o * o).abs());
        }
    }
    check(worst < 1e-9, format!("max deviation {worst:e}"))?;
    let (x, trace) = quadratic_pgd(0.37, 0.3, 0);
    check(x == 0.37 && trace == [0.37 * 0.37], "steps = 0 moved the iterate")?;
    let (x, _) = quadratic_pgd(0.37, 0.0, 5);
    check(x == 0.5, format!("eps = 0 gave {x}"))?;
    Ok(format!("11 step counts, max deviation {worst:.1e}; eps = 0 and steps = 0 exact"))
}

struct Runs {
    full: Vec<AdversarialRecord>,
    no_io: Vec<AdversarialRecord>,
}

fn criterion_7(f: &support::Fixture, runs: &Runs) -> Outcome {
    let backend = ToyBackend::seeded(0);
    let config = AttackConfig::default();
    check(config.lambda == -10.0, "lambda")?;
    let adv_texts: BTreeMap<String, TextSample> = runs
        .full
        .iter()
        .map(|r| (r.pair_id.clone(), r.adversarial_text.clone()))
        .collect();
    let by_image = |records: &[AdversarialRecord]| -> BTreeMap<String, ImageSample> {
        records.iter().map(|r| (r.image_id.clone(), r.adversarial_image.clone())).collect()
    };
    let (pre_images, post_images) = (by_image(&runs.no_io), by_image(&runs.full));
    let (mut pos_pre, mut pos_post, mut neg_pre, mut neg_post, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for members in partition(f.groups.len(), &config) {
        let batch = PairBatch::new(members.iter().map(|&i| f.groups[i].clone()).collect()).unwrap();
        for (i, g) in batch.groups().iter().enumerate() {
            let sets = build_contrast_sets(&batch, &adv_texts, i, config.m_captions).map_err(|e| e.to_string())?;
            let obj = ContrastiveObjective::encode(&sets, config.lambda, &backend).map_err(|e| e.to_string())?;
            let feat = |img: &ImageSample| backend.encode_image(img).unwrap().final_feature.to_vec();
            let (pre, post) = (feat(&pre_images[g.image.id()]), feat(&post_images[g.image.id()]));
            pos_pre += obj.mean_positive(&pre);
            pos_post += obj.mean_positive(&post);
            neg_pre += obj.mean_negative(&pre);
            neg_post += obj.mean_negative(&post);
            n += 1.0;
        }
    }
    let (pos_pre, pos_post, neg_pre, neg_post) = (pos_pre / n, pos_post / n, neg_pre / n, neg_post / n);
    check(pos_post < pos_pre, format!("positive mean {pos_pre:.4} -> {pos_post:.4}"))?;
    check(neg_post > neg_pre, format!("negative mean {neg_pre:.4} -> {neg_post:.4}"))?;

    let gap = |records: &[AdversarialRecord]| {
        let (_, adv) = pair_sets(&f.groups, records).unwrap();
        similarity_gap(&adv, &backend).unwrap()
    };
    let (gf, gn) = (gap(&runs.full), gap(&runs.no_io));
    check(gf.gap() < gn.gap(), format!("gap full {:.4} vs no_io {:.4}", gf.gap(), gn.gap()))?;
    Ok(format!(
        "stage 2: pos {pos_pre:.4} -> {pos_post:.4}, neg {neg_pre:.4} -> {neg_post:.4}; gap full {:.4} < no_io {:.4}",
        gf.gap(),
        gn.gap()
    ))
}

fn criterion_8() -> Outcome {
    let (clean, adv) = support::synthetic_features(7, 20, 1, 6, 0.9);
    for restrict in [true, false] {
        for galleries in [true, false] {
            let opts = EvalOptions {
                top_k: vec![1, 5, 10],
                restrict_to_clean_hits: restrict,
                adversarial_galleries: galleries,
            };
            let r = evaluate_features(&clean, &adv, &opts).map_err(|e| e.to_string())?;
            let (tr, ir) = support::brute_metrics(&clean, &adv, &opts.top_k, restrict, galleries);
            check(r.tr == tr && r.ir == ir, format!("restrict {restrict}, adversarial galleries {galleries}"))?;
        }
    }
    for seed in 0..50 {
        let (c, a) = support::synthetic_features(seed, 20, 1, 6, 1.5);
        let ks: Vec<usize> = (1..=20).collect();
        let opts = EvalOptions {
            top_k: ks.clone(),
            restrict_to_clean_hits: false,
            adversarial_galleries: true,
        };
        let r = evaluate_features(&c, &a, &opts).map_err(|e| e.to_string())?;
        for m in [&r.tr, &r.ir] {
            let asr: Vec<f64> = ks.iter().map(|k| m.asr[k]).collect();
            check(asr.windows(2).all(|w| w[0] >= w[1]), format!("seed {seed}: ASR not monotone in k"))?;
        }
    }
    let r = evaluate_features(&clean, &clean, &EvalOptions::default()).map_err(|e| e.to_string())?;
    check(r.tr.asr.values().chain(r.ir.asr.values()).all(|a| *a == 0.0), "clean-vs-clean ASR nonzero")?;
    Ok("20-pair gallery equals brute force in all 4 modes; ASR monotone in k on 50 galleries; clean-vs-clean ASR 0".into())
}

fn criterion_9(f: &support::Fixture) -> Outcome {
    let backend = ToyBackend::seeded(0);
    let mut notes = Vec::new();
    for a in Ablation::ALL {
        let config = AttackConfig::default().with_ablation(a);
        let run = attack_groups(&f.groups, &backend, &f.lexicon, &config, None, |_| Ok(())).map_err(|e| e.to_string())?;
        let bad = budget_violations(&run.records, &config);
        check(run.records.len() == 64 && bad == 0, format!("{}: {bad} over budget", a.name()))?;
        notes.push(a.name());
    }
    let mut trend = Vec::new();
    for b in [4, 8, 16] {
        let config = AttackConfig {
            batch_size: b,
            ..AttackConfig::default()
        };
        let (_, report) = attack_dataset(&f.manifest(), &backend, &backend, &f.lexicon, &config, &eval_options(&config, true, true))
            .map_err(|e| e.to_string())?;
        trend.push(mean_asr(&report));
    }
    check(trend.windows(2).all(|w| w[0] <= w[1]), format!("mean ASR {trend:?} decreases with B"))?;
    for (got, want) in trend.iter().zip(BATCH_TREND) {
        check((got - want).abs() < 1e-12, format!("mean ASR {trend:?} differs from recorded {BATCH_TREND:?}"))?;
    }
    Ok(format!("{} ablations within budget; mean ASR for B = 4/8/16: {trend:.4?}", notes.join(", ")))
}

fn criterion_10(f: &support::Fixture) -> Outcome {
    let run = |name: &str| {
        let common = CommonArgs {
            config: Some(f.config_path()),
            out: Some(f.dir.path().join(name)),
            ..CommonArgs::default()
        };
        cmd_attack(&common).map_err(|e| e.to_string())
    };
    let (a, b) = (run("det-a")?, run("det-b")?);
    for file in ["records.jsonl", "report.json"] {
        let (x, y) = (fs::read(a.dir.join(file)).unwrap(), fs::read(b.dir.join(file)).unwrap());
        check(x == y, format!("{file} differs"))?;
    }
    Ok(format!("records.jsonl and report.json byte-identical across two runs ({} records)", a.manifest.records))
}

fn main() {
    let fixture = support::Fixture::new(32);
    let backend = ToyBackend::seeded(0);
    let runs = {
        let go = |c: &AttackConfig| attack_groups(&fixture.groups, &backend, &fixture.lexicon, c, None, |_| Ok(())).unwrap().records;
        Runs {
            full: go(&AttackConfig::default()),
            no_io: go(&AttackConfig::default().with_ablation(Ablation::NoIo)),
        }
    };

    let criteria: Vec<Criterion> = vec![
        ("budget invariants", Box::new(|| criterion_1(&fixture))),
        ("gradient correctness", Box::new(criterion_2)),
        ("selection oracle", Box::new(criterion_3)),
        ("substitute-set oracle", Box::new(criterion_4)),
        ("layer-importance invariants", Box::new(criterion_5)),
        ("PGD oracle", Box::new(criterion_6)),
        ("contrastive mechanism", Box::new(|| criterion_7(&fixture, &runs))),
        ("metric oracle", Box::new(criterion_8)),
        ("ablation and batch-size harness", Box::new(|| criterion_9(&fixture))),
        ("determinism", Box::new(|| criterion_10(&fixture))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
