use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use exmvit::audit::{self, overhead_report, overhead_table, trace_table};
use exmvit::config::{self, Overrides, Profile, Rho, VariantConfig, NUM_BLOCKS};
use exmvit::io::{self, weights};
use exmvit::train::{self, GradCheckConfig, SyntheticConfig, SyntheticDataset, TrainConfig};
use exmvit::{Error, ModelGraph, Result};

#[derive(Parser)]
#[command(name = "exmvit", version, about = "MobileViT-S with ExShortcut classifier expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model and write its weights file.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter counts and totals.
    #[command(group(ArgGroup::new("source").args(["variant", "weights", "overhead"])))]
    Audit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Summary of every registered variant of the profile.
        #[arg(long)]
        overhead: bool,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Layer-by-layer output shapes and MACs.
    Trace {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train on the synthetic dataset.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        samples_per_class: usize,
        /// Keep an EMA of the weights and save it instead of the raw weights.
        #[arg(long)]
        ema: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration `iter,loss,acc,lr` CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Compare backprop against finite differences.
    GradCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = train::grad_check::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = train::grad_check::MODEL_STEP)]
        step: f64,
        #[arg(long, default_value_t = 10)]
        show: usize,
    },
    /// Top-5 classes for one PPM/PGM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Dump a block output or the classifier input as raw f32.
    #[command(group(ArgGroup::new("what").required(true).args(["block", "export_classifier_input"])))]
    ExportFeatures {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        block: Option<u8>,
        #[arg(long)]
        export_classifier_input: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "exmvit-928")]
    variant: String,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Five comma-separated ratios, e.g. `0,0,4/3,5/4,4`.
    #[arg(long, value_parser = parse_rho)]
    rho: Option<RhoArg>,
    #[arg(long)]
    allow_early_shortcuts: bool,
}

#[derive(Clone, Copy)]
struct RhoArg([Rho; NUM_BLOCKS]);

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rho(s: &str) -> Result<RhoArg, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != NUM_BLOCKS {
        return Err(format!("expected {NUM_BLOCKS} comma-separated ratios, got {}", parts.len()));
    }
    let mut rho = [Rho::ZERO; NUM_BLOCKS];
    for (r, p) in rho.iter_mut().zip(parts) {
        *r = p.parse().map_err(|e: Error| e.to_string())?;
    }
    Ok(RhoArg(rho))
}

impl ModelArgs {
    fn resolve(&self) -> Result<VariantConfig> {
        config::resolve_variant(
            &self.variant,
            &Overrides {
                class_count: self.classes,
                input_size: self.input_size,
                profile: self.profile,
                rho: self.rho.map(|r| r.0),
                allow_early_shortcuts: self.allow_early_shortcuts,
            },
        )
    }

    /// Like [`resolve`](Self::resolve) but defaulting to the tiny profile.
    fn resolve_tiny(&self) -> Result<VariantConfig> {
        let mut args = self.clone_args();
        args.profile.get_or_insert(Profile::Tiny);
        args.resolve()
    }

    fn clone_args(&self) -> ModelArgs {
        ModelArgs {
            variant: self.variant.clone(),
            profile: self.profile,
            classes: self.classes,
            input_size: self.input_size,
            rho: self.rho,
            allow_early_shortcuts: self.allow_early_shortcuts,
        }
    }
}

fn build_model(cfg: &VariantConfig, seed: Option<u64>) -> Result<ModelGraph> {
    let baseline = cfg.name.starts_with("mobilevit-s") && !cfg.name.ends_with("-custom");
    match (baseline, seed) {
        (true, _) => ModelGraph::build_baseline(cfg, seed),
        (false, Some(s)) => ModelGraph::build(cfg, s),
        (false, None) => ModelGraph::structure(cfg),
    }
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { model, seed, out } => {
            let cfg = model.resolve()?;
            let m = build_model(&cfg, Some(seed))?;
            weights::save(&m, &out)?;
            println!(
                "{}: {} parameters, classifier width {} -> {}",
                cfg.name,
                m.params().parameter_count(),
                m.classifier_width(),
                out.display()
            );
        }
        Command::Audit {
            model,
            weights: path,
            overhead,
            format,
        } => {
            if overhead {
                let profile = model.profile.unwrap_or(Profile::Imagenet);
                let names: Vec<String> = config::registered_names()
                    .into_iter()
                    .filter(|n| config::registry()[n].profile == profile)
                    .collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let rows = overhead_report(&refs)?;
                match format {
                    Format::Table => print!("{}", overhead_table(&rows)),
                    Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
                }
                return Ok(());
            }
            let m = match path {
                Some(p) => weights::load(p)?,
                None => build_model(&model.resolve()?, None)?,
            };
            let report = audit::count_params(&m)?;
            match format {
                Format::Table => print!("{}", report.to_table()),
                Format::Json => println!("{}", report.to_json()),
            }
        }
        Command::Trace { model } => {
            let cfg = model.resolve()?;
            let m = build_model(&cfg, None)?;
            let rows = audit::trace_shapes(&m, cfg.input_size)?;
            print!("{}", trace_table(&rows));
            for (k, s) in audit::block_shapes(&rows).iter().enumerate() {
                println!("block{}: {:?}", k + 1, s);
            }
        }
        Command::Train {
            model,
            epochs,
            seed,
            batch_size,
            samples_per_class,
            ema,
            out,
            history,
        } => {
            let cfg = model.resolve_tiny()?;
            let data = SyntheticDataset::generate(SyntheticConfig {
                class_count: cfg.class_count,
                samples_per_class,
                image_size: cfg.input_size,
                seed,
                ..SyntheticConfig::default()
            })?;
            let mut m = build_model(&cfg, Some(seed))?;
            let mut tc = TrainConfig::for_dataset(data.len(), batch_size, epochs, seed);
            if ema {
                tc.ema_decay = Some(train::schedule::DEFAULT_EMA_DECAY);
            }
            println!("training {} on {} synthetic images", cfg.name, data.len());
            let outcome = train::train_loop(&mut m, &data, &tc, |row, _| {
                println!(
                    "epoch {:>3}  loss {:.4}  train acc {:.3}",
                    row.epoch + 1,
                    row.mean_loss,
                    row.train_acc
                );
                ControlFlow::Continue(())
            })?;
            if let Some(shadow) = &outcome.ema {
                let acc = train::evaluate(&m, shadow, &data, 64)?;
                println!("ema train acc {acc:.3}");
                m.copy_params_from(shadow)?;
            }
            if let Some(p) = history {
                std::fs::write(&p, outcome.history.to_csv()).map_err(|e| Error::Io { path: p, source: e })?;
            }
            if let Some(p) = out {
                weights::save(&m, &p)?;
                println!("weights -> {}", p.display());
            }
        }
        Command::GradCheck {
            model,
            seed,
            tolerance,
            samples,
            step,
            show,
        } => {
            let cfg = model.resolve_tiny()?;
            let m = build_model(&cfg, Some(seed))?;
            let data = SyntheticDataset::generate(SyntheticConfig {
                class_count: cfg.class_count,
                samples_per_class: 1,
                image_size: cfg.input_size,
                seed,
                ..SyntheticConfig::default()
            })?;
            let (x, y) = data.batch(&[0, 1.min(data.len() - 1)]);
            let report = train::grad_check(
                &m,
                &x,
                &y,
                &GradCheckConfig {
                    samples,
                    step,
                    tolerance,
                    seed,
                    ..GradCheckConfig::default()
                },
            )?;
            println!(
                "{}: {} scalars checked, max relative error {:.3e} (tolerance {:.1e})",
                if report.passed() { "PASS" } else { "FAIL" },
                report.checks.len(),
                report.max_rel_err,
                report.tolerance
            );
            let worst = report.worst(show);
            let w = worst.iter().map(|c| c.param.len()).max().unwrap_or(9).max(9);
            println!("{:<w$} {:>8} {:>14} {:>14} {:>10}", "parameter", "index", "analytic", "numeric", "rel err");
            for c in worst {
                println!(
                    "{:<w$} {:>8} {:>14.6e} {:>14.6e} {:>10.2e}",
                    c.param, c.index, c.analytic, c.numeric, c.rel_err
                );
            }
            if !report.passed() {
                return Err(Error::InvalidArgument("gradient check failed".into()));
            }
        }
        Command::Infer { weights: w, image } => {
            let m = weights::load(w)?;
            let x = io::load_image(image, m.config().input_size)?;
            let out = m.infer(&x)?;
            let probs = softmax(out.logits.data());
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            for &c in order.iter().take(5) {
                println!("{c:>5}  {:.6}", probs[c]);
            }
        }
        Command::ExportFeatures {
            weights: w,
            image,
            block,
            export_classifier_input: _,
            out,
        } => {
            let m = weights::load(w)?;
            let x = io::load_image(image, m.config().input_size)?;
            let o = m.infer(&x)?;
            let block = block.map(usize::from);
            let t = match block {
                Some(k) => &o.blocks.features[k - 1],
                None => &o.classifier_input,
            };
            io::write_features(&out, t, block, &m.config().name)?;
            println!("{:?} -> {}", t.shape(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
