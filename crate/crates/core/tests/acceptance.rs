//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use exmvit::audit::{self, count_params};
use exmvit::config::{self, expand_width, Overrides, Profile};
use exmvit::exshortcut::ExShortcutHead;
use exmvit::model::Head;
use exmvit::params::{LayerKind, ParamStore};
use exmvit::train::grad_check::DEFAULT_STEP;
use exmvit::train::{
    compute_gradients, grad_check, lr_schedule, train_loop, GradCheckConfig, SyntheticConfig, SyntheticDataset,
    TrainConfig,
};
use exmvit::{ModelGraph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Table order of the full-size variants, baseline first.
const VARIANTS: [&str; 6] = ["mobilevit-s", "exmvit-576", "exmvit-640", "exmvit-704", "exmvit-864", "exmvit-928"];

/// Reference totals in millions, same order as `VARIANTS`.
const REFERENCE_MILLIONS: [f64; 6] = [5.579, 5.489, 5.553, 5.643, 5.803, 5.867];

/// First 1-based epoch at which the pinned toy run reached 90% train
/// accuracy when first established (eval accuracy 0.992 at that epoch).
const PINNED_EPOCH: usize = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn resolve(name: &str) -> Result<config::VariantConfig> {
    config::resolve_variant(name, &Overrides::default())
}

fn structure(name: &str) -> Result<ModelGraph> {
    let cfg = resolve(name)?;
    if name.starts_with("mobilevit-s") {
        ModelGraph::build_baseline(&cfg, None)
    } else {
        ModelGraph::structure(&cfg)
    }
}

fn criterion_1() -> Result<Outcome> {
    // Σ ρ_k·C̃_k with ρ written as integer fractions.
    let channels = [32i64, 64, 96, 128, 160];
    let table: [[(i64, i64); 5]; 6] = [
        [(0, 1), (0, 1), (0, 1), (0, 1), (4, 1)],
        [(0, 1), (0, 1), (1, 3), (1, 2), (3, 1)],
        [(0, 1), (0, 1), (1, 3), (1, 1), (3, 1)],
        [(0, 1), (0, 1), (1, 3), (1, 4), (4, 1)],
        [(0, 1), (0, 1), (1, 1), (1, 1), (4, 1)],
        [(0, 1), (0, 1), (4, 3), (5, 4), (4, 1)],
    ];
    let expected = [640usize, 576, 640, 704, 864, 928];
    let mut widths = Vec::new();
    let mut pass = true;
    for ((name, row), want) in VARIANTS.iter().zip(table).zip(expected) {
        let cfg = resolve(name)?;
        let w = expand_width(&cfg.rho, &cfg.block_channels)?;
        let oracle: i64 = row
            .iter()
            .zip(channels)
            .map(|(&(n, d), c)| {
                assert_eq!(n * c % d, 0);
                n * c / d
            })
            .sum();
        pass &= w == want && oracle as usize == want;
        widths.push(w);
    }
    outcome(pass, format!("widths {widths:?}"))
}

fn criterion_2() -> Result<Outcome> {
    let mut strict = Vec::new();
    let mut paper = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, reference) in VARIANTS.iter().zip(REFERENCE_MILLIONS) {
        let r = count_params(&structure(name)?)?;
        for total in [r.strict_total, r.paper_convention_total] {
            let dev = (total as f64 / 1e6 - reference) / reference * 100.0;
            worst = worst.max(dev.abs());
        }
        strict.push(r.strict_total);
        paper.push(r.paper_convention_total);
    }
    // 576 < 640 < baseline < 704 < 864 < 928
    let ordered = |t: &[usize]| {
        let seq = [t[1], t[2], t[0], t[3], t[4], t[5]];
        seq.windows(2).all(|w| w[0] < w[1])
    };
    let pass = worst <= 1.5 && ordered(&strict) && ordered(&paper);
    let fmt = |t: &[usize]| t.iter().map(|&v| audit::millions(v)).collect::<Vec<_>>().join(" ");
    outcome(
        pass,
        format!(
            "strict [{}], paper-convention [{}], worst deviation {worst:.2}%",
            fmt(&strict),
            fmt(&paper)
        ),
    )
}

fn criterion_3() -> Result<Outcome> {
    let r928 = count_params(&structure("exmvit-928")?)?.overhead_vs_baseline_percent;
    let r640 = count_params(&structure("exmvit-640")?)?.overhead_vs_baseline_percent;
    let pass = (r928 - 5.16).abs() <= 0.5 && (r640 - -0.47).abs() <= 0.5;
    outcome(pass, format!("928 {r928:+.2}%, 640 {r640:+.2}%"))
}

fn criterion_4() -> Result<Outcome> {
    let model = structure("exmvit-928")?;
    let shapes = audit::block_shapes(&audit::trace_shapes(&model, 256)?);
    let sides: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    let square = shapes.iter().all(|s| s[2] == s[3]);
    outcome(sides == [128, 64, 32, 16, 8] && square, format!("sides {sides:?}"))
}

fn criterion_5() -> Result<Outcome> {
    let seed = 11;
    let cfg = resolve("mobilevit-s-tiny")?;
    let via_shortcut = ModelGraph::build(&cfg, seed)?;
    let direct = ModelGraph::build_mobilevit_s(Profile::Tiny, cfg.class_count, Some(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = cfg.input_size;
    let x = Tensor::from_fn(vec![2, 3, s, s], |_| rng.random_range(0.0f32..1.0));
    let a = via_shortcut.infer(&x)?.logits;
    let b = direct.infer(&x)?.logits;
    let bitwise = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let tiny_counts = (via_shortcut.params().parameter_count(), direct.params().parameter_count());
    let full = resolve("mobilevit-s")?;
    let full_counts = (
        ModelGraph::structure(&full)?.params().parameter_count(),
        ModelGraph::build_baseline(&full, None)?.params().parameter_count(),
    );
    let pass = bitwise && tiny_counts.0 == tiny_counts.1 && full_counts.0 == full_counts.1;
    outcome(
        pass,
        format!(
            "tiny {} / {} params, logits bitwise {}, imagenet {} / {} params",
            tiny_counts.0,
            tiny_counts.1,
            if bitwise { "equal" } else { "differ" },
            full_counts.0,
            full_counts.1
        ),
    )
}

fn grad_check_batch(model: &ModelGraph) -> Result<(Tensor<f32>, Vec<usize>)> {
    let cfg = model.config();
    let data = SyntheticDataset::generate(SyntheticConfig {
        class_count: cfg.class_count,
        samples_per_class: 1,
        image_size: cfg.input_size,
        seed: 0,
        ..SyntheticConfig::default()
    })?;
    Ok(data.batch(&[0, 1]))
}

fn criterion_6() -> Result<Outcome> {
    let model = ModelGraph::build(&resolve("exmvit-928-tiny")?, 0)?;
    let (x, y) = grad_check_batch(&model)?;
    let report = grad_check(&model, &x, &y, &GradCheckConfig::default())?;
    let present: BTreeSet<LayerKind> = model.params().layers().iter().map(|l| l.kind).collect();
    let covered: BTreeSet<LayerKind> = report.kinds_covered.iter().copied().collect();
    let coarse = grad_check(
        &model,
        &x,
        &y,
        &GradCheckConfig {
            step: DEFAULT_STEP,
            ..GradCheckConfig::default()
        },
    )?;
    let pass = report.passed()
        && report.checks.len() >= 200
        && covered == present
        && covered.contains(&LayerKind::ShortcutConv);
    outcome(
        pass,
        format!(
            "{} scalars, {} of {} layer kinds, max rel err {:.2e} at h=1e-4 (h=1e-3 gives {:.2e})",
            report.checks.len(),
            covered.len(),
            present.len(),
            report.max_rel_err,
            coarse.max_rel_err
        ),
    )
}

fn criterion_7() -> Result<Outcome> {
    let model = ModelGraph::build(&resolve("exmvit-928-tiny")?, 4)?;
    let s = model.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(vec![4, 3, s, s], |_| rng.random_range(0.0f32..1.0));
    let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..model.config().class_count)).collect();
    let step = compute_gradients(&model, &x, &y, 0.1)?;
    let Head::ExShortcut(ExShortcutHead { shortcuts, .. }) = model.head() else {
        return outcome(false, "model has no shortcut head");
    };
    let mut norms = Vec::new();
    for sc in shortcuts {
        let g = step.grads[sc.conv.weight.index()].as_deref().unwrap_or(&[]);
        let n = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        norms.push((sc.spec.block_index, n));
    }
    let pass = norms.len() == 3 && norms.iter().all(|&(_, n)| n > 0.0 && n.is_finite());
    let detail = norms
        .iter()
        .map(|(k, n)| format!("block{k} {n:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("shortcut weight-gradient norms: {detail}"))
}

fn criterion_8() -> Result<Outcome> {
    let full = TrainConfig::default();
    let toy = TrainConfig::for_dataset(512, 32, 50, 0);
    let mut pass = true;
    let mut detail = Vec::new();
    for c in [&full, &toy] {
        let v = [
            lr_schedule(0, c) as f32,
            lr_schedule(c.warmup_iters, c) as f32,
            lr_schedule(c.total_iters, c) as f32,
        ];
        pass &= v == [0.0002f32, 0.002, 0.0002];
        detail.push(format!("{}/{} iters: {v:?}", c.warmup_iters, c.total_iters));
    }
    outcome(pass, detail.join("; "))
}

fn param_bits(store: &ParamStore) -> Vec<u32> {
    store
        .entries()
        .iter()
        .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
        .collect()
}

struct ToyRun {
    accs: Vec<f64>,
    losses: Vec<u64>,
    params: Vec<u32>,
}

/// Trains the tiny 928 mirror, stopping after the first epoch at ≥90%.
fn toy_run() -> Result<ToyRun> {
    let cfg = resolve("exmvit-928-tiny")?;
    let data = SyntheticDataset::generate(SyntheticConfig::default())?;
    let mut model = ModelGraph::build(&cfg, 0)?;
    let tc = TrainConfig::for_dataset(data.len(), 32, 50, 0);
    let out = train_loop(&mut model, &data, &tc, |row, _| {
        if row.train_acc >= 0.9 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    Ok(ToyRun {
        accs: out.history.epochs.iter().map(|e| e.train_acc).collect(),
        losses: out.history.rows.iter().map(|r| r.loss.to_bits()).collect(),
        params: param_bits(model.params()),
    })
}

fn criterion_9(first_epoch: &mut Option<usize>) -> Result<Outcome> {
    let a = toy_run()?;
    let b = toy_run()?;
    let reached = a.accs.iter().position(|&v| v >= 0.9).map(|i| i + 1);
    *first_epoch = reached;
    let reproducible = a.accs == b.accs && a.losses == b.losses && a.params == b.params;
    let best = a.accs.iter().cloned().fold(0.0, f64::max);
    outcome(
        reached.is_some() && reproducible,
        format!(
            "train acc {best:.3} at epoch {}, two runs bitwise {}",
            reached.map_or("none".into(), |e| e.to_string()),
            if reproducible { "identical" } else { "different" }
        ),
    )
}

fn criterion_10(substitutes_pass: bool, first_epoch: Option<usize>) -> Result<Outcome> {
    let pinned = first_epoch.is_some_and(|e| e <= PINNED_EPOCH);
    outcome(
        substitutes_pass && pinned,
        format!(
            "ImageNet accuracy not reproduced; substitute suite 5-9 {}, 90% epoch {} vs pinned {PINNED_EPOCH}",
            if substitutes_pass { "passes" } else { "fails" },
            first_epoch.map_or("none".into(), |e| e.to_string())
        ),
    )
}

fn report(index: usize, budget: Duration, run: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = run();
    let took = start.elapsed();
    let (pass, detail) = match result {
        Ok(o) => (o.pass && took <= budget, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} criterion {index:>2}: {detail} [{:.1}s, budget {}s]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut first_epoch = None;
    let mut all = vec![
        report(1, secs(1), criterion_1),
        report(2, secs(5), criterion_2),
        report(3, secs(5), criterion_3),
        report(4, secs(5), criterion_4),
        report(5, secs(30), criterion_5),
        report(6, secs(300), criterion_6),
        report(7, secs(60), criterion_7),
        report(8, secs(1), criterion_8),
        report(9, secs(600), || criterion_9(&mut first_epoch)),
    ];
    let substitutes = all[4..9].iter().all(|&p| p);
    all.push(report(10, secs(1), || criterion_10(substitutes, first_epoch)));
    if all.iter().all(|&p| p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
