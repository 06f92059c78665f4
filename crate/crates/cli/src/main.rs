//! `gradrep`: command-line driver for the gradient re-parameterization lab.
//!
//! Every subcommand reads a [`RunConfig`] (file, then `GRADREP_SEED`, then
//! `--set` overrides), runs one job and writes its reports into `--out`.
//! Failures print one JSON object on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gradrep::checkpoint::Checkpoint;
use gradrep::config::{OptimizerChoice, RunConfig};
use gradrep::data::{write_cifar, CifarVariant, Dataset};
use gradrep::hypersearch::{degrade_scales, export_scales, import_scales, init_hs_scales, run_hyper_search, DegradeMode, ScalesFile};
use gradrep::lab::{
    convert_to_deploy, identity_variance_ratio, set_hs_scales, sign_test_p, spearman, verify_csla_gr, EquivConfig,
};
use gradrep::models::{build_hypersearch, build_repvgg, build_resnet_reference, build_target, CslaBlockSpec, Init, ModelKind, ModelSpec, Network};
use gradrep::optim::{GradMultTable, OptimizerConfig, UpdateRule};
use gradrep::quant::{kernel_position_stats, ptq_model};
use gradrep::report::{csv, ensure_dir, write_json, write_text};
use gradrep::train::{evaluate, AblationRow, Recipe, TrainConfig, Trainer};
use gradrep::{Error, ParamId, Rng, Tensor};

#[derive(Parser)]
#[command(name = "gradrep", version, about = "Gradient re-parameterization lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (`key=value`); repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the hyper-search model and export its scales.
    HyperSearch,
    /// Train a model; `--scales` enables gradient re-parameterization.
    Train(TrainArgs),
    /// Lockstep CSLA block vs RepOptimizer check.
    VerifyEquivalence(VerifyArgs),
    /// Convert a trained checkpoint to its single-conv inference form.
    Convert(CheckpointArgs),
    /// INT8 post-training quantization of a checkpoint.
    Quantize(CheckpointArgs),
    /// Identity-variance study at initialization.
    Analyze(AnalyzeArgs),
    /// Write the configured dataset in CIFAR binary layout.
    GenData,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Target,
    Repvgg,
    Csla,
    HyperSearch,
}

#[derive(Args)]
struct TrainArgs {
    /// ScalesFile from `hyper-search`.
    #[arg(long)]
    scales: Option<PathBuf>,
    #[arg(long, value_enum)]
    optimizer: Option<OptArg>,
    /// Skip the equivalent-kernel initialization.
    #[arg(long)]
    no_reinit: bool,
    /// Skip the gradient multipliers.
    #[arg(long)]
    no_gradmult: bool,
    #[arg(long, value_enum)]
    scales_mode: Option<ScalesMode>,
    /// Architecture trained with a plain optimizer when no scales are given.
    #[arg(long, value_enum, default_value = "target")]
    arch: Arch,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train every row of the optimizer ablation matrix instead of one model.
    #[arg(long)]
    ablation_matrix: bool,
    /// Seeds of the ablation matrix (defaults to the configured seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptArg {
    Sgd,
    Repopt,
    Adamw,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScalesMode {
    Searched,
    AllOnes,
    HsInit,
    ChannelMean,
}

#[derive(Args)]
struct VerifyArgs {
    /// Failure threshold on the output divergence.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Random inputs per seed.
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = format!("{e:#}");
            eprintln!("{}", json!({ "error": kind, "message": msg }));
            ExitCode::from(code)
        }
    }
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_)) => ("usage", 2),
        Some(Error::Config(_)) => ("config", 2),
        Some(Error::Shape { .. }) => ("shape", 1),
        Some(Error::InvalidArgument(_)) => ("invalid_argument", 1),
        Some(Error::NonFinite(_)) => ("non_finite", 1),
        Some(Error::Layer { .. }) => ("layer", 1),
        Some(Error::Parse { .. }) => ("parse", 1),
        Some(Error::Version { .. }) => ("version", 1),
        Some(Error::Diverged { .. }) => ("diverged", 1),
        Some(Error::Io { .. }) => ("io", 1),
        Some(Error::Json(_)) => ("json", 1),
        None => ("error", 1),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out;
    ensure_dir(&out)?;
    match cli.command {
        Command::HyperSearch => hyper_search(&cfg, &out),
        Command::Train(args) => {
            apply_train_flags(&mut cfg, &args);
            if args.ablation_matrix {
                ablation_matrix(&cfg, &args, &out)
            } else {
                train(&cfg, &args, &out)
            }
        }
        Command::VerifyEquivalence(args) => verify(&cfg, &args, &out),
        Command::Convert(args) => convert(&cfg, &args.checkpoint, &out),
        Command::Quantize(args) => quantize(&cfg, &args.checkpoint, &out),
        Command::Analyze(args) => analyze(&cfg, &args, &out),
        Command::GenData => gen_data(&cfg, &out),
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_config_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_json(out, "config.json", cfg)?;
    Ok(())
}

fn hyper_search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, _) = cfg.datasets()?;
    let spec = cfg.model_spec(train.num_classes, train.resolution)?;
    let outcome = run_hyper_search(&spec, &train, &cfg.optimizer_config()?, cfg.seed)?;
    export_scales(&out.join("scales.json"), &outcome.scales)?;
    write_text(out, "trajectory.csv", &outcome.trajectory.to_csv())?;
    write_text(out, "metrics.csv", &metrics_csv(&outcome.metrics))?;
    write_json(
        out,
        "summary.json",
        &json!({
            "job": "hyper-search",
            "seed": cfg.seed,
            "blocks": outcome.scales.blocks.len(),
            "final_loss": outcome.metrics.last().map(|m| m.mean_loss),
        }),
    )?;
    write_config_echo(cfg, out)
}

fn metrics_csv(stats: &[gradrep::train::EpochStats]) -> String {
    csv(
        &["epoch", "mean_loss", "train_accuracy", "last_lr"],
        stats
            .iter()
            .map(|s| vec![s.epoch.to_string(), fmt(s.mean_loss), fmt(s.train_accuracy), fmt(s.last_lr)]),
    )
}

fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(o) = args.optimizer {
        cfg.optimizer = match o {
            OptArg::Sgd => OptimizerChoice::Sgd,
            OptArg::Repopt => OptimizerChoice::Repopt,
            OptArg::Adamw => OptimizerChoice::Adamw,
        };
    }
    if args.no_reinit {
        cfg.reinit = false;
    }
    if args.no_gradmult {
        cfg.gradmult = false;
    }
    if let Some(m) = args.scales_mode {
        cfg.scales_mode = match m {
            ScalesMode::Searched => "searched",
            ScalesMode::AllOnes => "all-ones",
            ScalesMode::HsInit => "hs-init",
            ScalesMode::ChannelMean => "channel-mean",
        }
        .into();
    }
}

fn load_scales(args: &TrainArgs, spec: &ModelSpec, mode: &str) -> Result<Option<ScalesFile>> {
    let Some(path) = &args.scales else { return Ok(None) };
    let f = import_scales(path)?;
    f.check_against(spec).with_context(|| format!("{} does not fit the configured model", path.display()))?;
    Ok(Some(match mode {
        "searched" => f,
        m => degrade_scales(&f, DegradeMode::parse(m)?),
    }))
}

fn train_recipe(cfg: &RunConfig, args: &TrainArgs, spec: &ModelSpec) -> Result<(Recipe, UpdateRule)> {
    let scales = load_scales(args, spec, &cfg.scales_mode)?;
    let rule = match cfg.optimizer {
        OptimizerChoice::Adamw => UpdateRule::AdamW,
        _ => UpdateRule::Sgd,
    };
    if cfg.optimizer == OptimizerChoice::Repopt && scales.is_none() {
        return Err(Error::Usage("--optimizer repopt needs --scales <file> from hyper-search".into()).into());
    }
    if scales.is_none() && (!cfg.reinit || !cfg.gradmult || cfg.scales_mode != "searched") {
        return Err(Error::Usage("--no-reinit, --no-gradmult and --scales-mode only apply with --scales".into()).into());
    }
    let recipe = match (args.arch, scales) {
        (Arch::Csla, Some(s)) => Recipe::Csla(s),
        (Arch::Csla, None) => return Err(Error::Usage("--arch csla needs --scales <file>".into()).into()),
        (Arch::Target, Some(s)) => Recipe::RepOpt {
            scales: s,
            reinit: cfg.reinit,
            gradmult: cfg.gradmult,
        },
        (_, Some(_)) => return Err(Error::Usage("--scales applies to the target or csla architecture".into()).into()),
        (Arch::Target, None) => Recipe::Target,
        (Arch::Repvgg, None) => Recipe::RepVgg,
        (Arch::HyperSearch, None) => Recipe::HyperSearch,
    };
    Ok((recipe, rule))
}

fn train_config(cfg: &RunConfig, rule: UpdateRule, seed: u64) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(cfg.optimizer_config()?, seed);
    tc.rule = rule;
    tc.augment = cfg.augment;
    Ok(tc)
}

fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let (train, test) = cfg.datasets()?;
    let spec = cfg.model_spec(train.num_classes, train.resolution)?;
    let (recipe, rule) = train_recipe(cfg, args, &spec)?;
    let mut trainer = Trainer::from_recipe(&recipe, &spec, train_config(cfg, rule, cfg.seed)?)?;
    if let Some(p) = &args.resume {
        Checkpoint::load(p)?.restore(&mut trainer)?;
    }
    let stats = trainer.fit(&train)?;
    let eval = trainer.evaluate(&test)?;
    Checkpoint::capture(&trainer, recipe.name()).save(&out.join("checkpoint.bin"))?;
    write_text(out, "metrics.csv", &metrics_csv(&stats))?;
    write_text(
        out,
        "predictions.csv",
        &csv(
            &["index", "label", "prediction"],
            eval.predictions
                .iter()
                .enumerate()
                .map(|(i, p)| vec![i.to_string(), test.label(i).to_string(), p.to_string()]),
        ),
    )?;
    write_json(
        out,
        "summary.json",
        &json!({
            "job": "train",
            "recipe": recipe.name(),
            "rule": rule,
            "seed": cfg.seed,
            "epochs": trainer.epoch,
            "params": trainer.net.num_params(),
            "test_accuracy": eval.accuracy,
            "test_loss": eval.mean_loss,
        }),
    )?;
    write_config_echo(cfg, out)
}

fn ablation_matrix(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let (train, test) = cfg.datasets()?;
    let spec = cfg.model_spec(train.num_classes, train.resolution)?;
    let Some(searched) = load_scales(args, &spec, "searched")? else {
        return Err(Error::Usage("--ablation-matrix needs --scales <file> from hyper-search".into()).into());
    };
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
    let repopt = |source: &str, scales: ScalesFile, reinit: bool, gradmult: bool| {
        (
            "RepOptimizer".to_string(),
            source.to_string(),
            reinit,
            gradmult,
            Recipe::RepOpt { scales, reinit, gradmult },
        )
    };
    let rows = vec![
        ("SGD".to_string(), "n/a".to_string(), false, false, Recipe::Target),
        repopt("hyper_search", searched.clone(), true, true),
        repopt("hyper_search", searched.clone(), false, true),
        repopt("hyper_search", searched.clone(), true, false),
        repopt("all_ones", degrade_scales(&searched, DegradeMode::AllOnes), true, true),
        repopt("hs_init", degrade_scales(&searched, DegradeMode::HsInit), true, true),
        repopt("channel_mean", degrade_scales(&searched, DegradeMode::ChannelMean), true, true),
    ];
    let mut report = Vec::new();
    for (optimizer, source, change_init, modify_grads, recipe) in rows {
        let mut accuracies = Vec::new();
        for &seed in &seeds {
            let mut t = Trainer::from_recipe(&recipe, &spec, train_config(cfg, UpdateRule::Sgd, seed)?)?;
            t.fit(&train)?;
            accuracies.push(t.evaluate(&test)?.accuracy);
        }
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        report.push(AblationRow {
            optimizer,
            source,
            change_init,
            modify_grads,
            seeds: seeds.clone(),
            accuracies,
            mean_accuracy,
        });
    }
    write_text(
        out,
        "ablation.csv",
        &csv(
            &["optimizer", "source", "change_init", "modify_grads", "mean_accuracy"],
            report.iter().map(|r| {
                vec![
                    r.optimizer.clone(),
                    r.source.clone(),
                    r.change_init.to_string(),
                    r.modify_grads.to_string(),
                    fmt(r.mean_accuracy),
                ]
            }),
        ),
    )?;
    write_json(out, "ablation.json", &report)?;
    write_config_echo(cfg, out)
}

fn verify(cfg: &RunConfig, args: &VerifyArgs, out: &Path) -> Result<()> {
    let c = cfg.equiv_channels;
    let mut rng = Rng::stream(cfg.seed, 0x5CA1E);
    let s: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let t: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.2, 1.2)).collect();
    let block = CslaBlockSpec::new(c, c, 1, s, t)?;
    let ec = EquivConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        ..EquivConfig::full(cfg.lr)
    };
    let report = verify_csla_gr(&block, cfg.equiv_steps, &ec, cfg.seed)?;
    write_text(out, "equivalence.csv", &report.to_csv())?;
    write_json(out, "equivalence.json", &report.summary())?;
    write_config_echo(cfg, out)?;
    let div = report.max_output_div();
    if !(div <= args.tolerance) {
        return Err(Error::InvalidArgument(format!("max output divergence {div:e} exceeds {:e}", args.tolerance)).into());
    }
    Ok(())
}

/// Untrained network with the checkpoint's architecture, then its state.
fn network_from_checkpoint(ck: &Checkpoint) -> Result<Network> {
    let spec = &ck.header.spec;
    let mut net = match ck.header.recipe.as_str() {
        "target" | "repopt" => build_target(spec, Init::Zeros)?,
        "repvgg" => build_repvgg(spec, Init::Zeros)?,
        "hyper_search" => build_hypersearch(spec, Init::Zeros)?,
        "deploy" => convert_to_deploy(&build_target(spec, Init::Zeros)?)?,
        other => return Err(Error::InvalidArgument(format!("checkpoint recipe '{other}' cannot be rebuilt")).into()),
    };
    if net.graph.param_values().len() != ck.params.len() || net.graph.bn_states().len() != ck.batchnorm.len() {
        return Err(Error::InvalidArgument("checkpoint parameter layout does not match its recipe".into()).into());
    }
    for (i, p) in ck.params.iter().enumerate() {
        net.graph.set_param(ParamId(i), p.clone())?;
    }
    net.graph.bn_states_mut().clone_from_slice(&ck.batchnorm);
    Ok(net)
}

fn deploy_checkpoint(net: Network, seed: u64) -> Result<Checkpoint> {
    let table = GradMultTable::new(net.graph.param_values().len());
    let trainer = Trainer::new(net, table, TrainConfig::new(OptimizerConfig::default(), seed))?;
    Ok(Checkpoint::capture(&trainer, "deploy"))
}

fn deployed(ck: &Checkpoint) -> Result<Network> {
    let net = network_from_checkpoint(ck)?;
    Ok(if net.kind == ModelKind::Deploy { net } else { convert_to_deploy(&net)? })
}

fn kernel_stats_csv(net: &Network) -> Result<String> {
    let mut rows = Vec::new();
    for b in std::iter::once(&net.stem).chain(&net.blocks) {
        let s = kernel_position_stats(net.graph.param_value(b.kernel))?;
        rows.push(vec![
            format!("block{}", b.geometry.index),
            fmt(s.std_overall),
            fmt(s.std_central),
            fmt(s.std_surrounding),
        ]);
    }
    rows[0][0] = "stem".into();
    Ok(csv(&["layer", "std_overall", "std_central", "std_surrounding"], rows))
}

fn convert(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut original = network_from_checkpoint(&ck)?;
    let mut deploy = convert_to_deploy(&original)?;
    let (_, test) = cfg.datasets()?;
    let n = test.len().min(cfg.batch_size.max(1));
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = test.batch(&idx, None);
    original.set_mode(gradrep::Mode::Eval);
    deploy.set_mode(gradrep::Mode::Eval);
    let a = original.forward(x.clone(), y.clone())?.clone();
    let b = deploy.forward(x, y)?.clone();
    let diff = a.max_abs_diff(&b)?;
    write_text(out, "kernel_stats.csv", &kernel_stats_csv(&deploy)?)?;
    write_json(
        out,
        "convert.json",
        &json!({
            "job": "convert",
            "recipe": ck.header.recipe,
            "inputs": n,
            "max_logit_diff": diff,
            "params_before": original.num_params(),
            "params_after": deploy.num_params(),
        }),
    )?;
    deploy_checkpoint(deploy, cfg.seed)?.save(&out.join("deploy.bin"))?;
    write_config_echo(cfg, out)
}

fn calibration_batches(data: &Dataset, batches: usize, batch_size: usize) -> Vec<Tensor> {
    let n = data.len();
    (0..batches)
        .map(|b| b * batch_size..((b + 1) * batch_size).min(n))
        .filter(|r| !r.is_empty())
        .map(|r| data.batch(&r.collect::<Vec<_>>(), None).0)
        .collect()
}

fn quantize(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut fp = deployed(&ck)?;
    let (train, test) = cfg.datasets()?;
    let calibration = calibration_batches(&train, cfg.calibration, cfg.batch_size);
    let (mut q, layers) = ptq_model(&fp, &calibration)?;
    let fp_acc = evaluate(&mut fp, &test, 250)?.accuracy;
    let int8_acc = evaluate(&mut q, &test, 250)?.accuracy;
    write_text(
        out,
        "ptq_layers.csv",
        &csv(
            &["layer", "weight_scale", "activation_scale"],
            layers.iter().map(|l| vec![l.layer.clone(), fmt(l.weight_scale), fmt(l.activation_scale)]),
        ),
    )?;
    write_text(out, "kernel_stats.csv", &kernel_stats_csv(&fp)?)?;
    write_json(
        out,
        "quantize.json",
        &json!({
            "job": "quantize",
            "recipe": ck.header.recipe,
            "calibration_batches": calibration.len(),
            "test_samples": test.len(),
            "fp_acc": fp_acc,
            "int8_acc": int8_acc,
            "drop": fp_acc - int8_acc,
        }),
    )?;
    write_config_echo(cfg, out)
}

fn analyze(cfg: &RunConfig, args: &AnalyzeArgs, out: &Path) -> Result<()> {
    if args.seeds == 0 || args.batch == 0 {
        return Err(Error::Usage("--seeds and --batch must be positive".into()).into());
    }
    let spec = cfg.model_spec(cfg.classes, cfg.resolution)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|s| cfg.seed + s).collect();
    let batch = |seed: u64| {
        let mut rng = Rng::stream(seed, 0xA7A1);
        let hw = spec.input_hw;
        Tensor::from_fn([args.batch, spec.in_channels, hw, hw], |_| rng.gaussian())
    };
    let depth = |ids: &[usize]| -> Vec<f64> {
        let blocks = spec.blocks();
        ids.iter().map(|&i| blocks[i].identity_depth.unwrap_or(0) as f64).collect()
    };
    let resnet = identity_variance_ratio(|s| Ok(build_resnet_reference(&spec, Init::Seeded(s))?), &batch, &seeds)?;
    let hs = identity_variance_ratio(|s| Ok(build_hypersearch(&spec, Init::Seeded(s))?), &batch, &seeds)?;
    let ones = identity_variance_ratio(
        |s| {
            let mut net = build_hypersearch(&spec, Init::Seeded(s))?;
            set_hs_scales(&mut net, |_| 1.0)?;
            Ok(net)
        },
        &batch,
        &seeds,
    )?;
    let deep = |r: &gradrep::lab::VarianceRatios| -> Vec<f64> {
        let d = depth(&r.block_ids);
        let max = d.iter().cloned().fold(0.0, f64::max);
        r.per_seed
            .iter()
            .map(|row| {
                let v: Vec<f64> = row.iter().zip(&d).filter(|(_, &di)| di * 2.0 > max).map(|(x, _)| *x).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    };
    let (deep_hs, deep_ones) = (deep(&hs), deep(&ones));
    let wins = deep_hs.iter().zip(&deep_ones).filter(|(a, b)| a > b).count();
    let mut rows = Vec::new();
    for (name, r) in [("resnet", &resnet), ("hs_sqrt", &hs), ("hs_ones", &ones)] {
        for (&id, (&m, d)) in r.block_ids.iter().zip(r.mean.iter().zip(depth(&r.block_ids))) {
            rows.push(vec![name.to_string(), format!("block{id}"), fmt(d), fmt(m)]);
        }
    }
    write_text(out, "variance_ratios.csv", &csv(&["model", "block", "identity_depth", "mean_ratio"], rows))?;
    write_json(
        out,
        "analyze.json",
        &json!({
            "job": "analyze",
            "seeds": seeds,
            "batch": args.batch,
            "resnet_spearman_depth": spearman(&depth(&resnet.block_ids), &resnet.mean),
            "hs_init_deepest": spec.blocks().iter().filter_map(|g| g.identity_depth).max().map(init_hs_scales),
            "deep_ratio_hs_sqrt": deep_hs,
            "deep_ratio_hs_ones": deep_ones,
            "sign_test_wins": wins,
            "sign_test_p": sign_test_p(wins, seeds.len()),
        }),
    )?;
    write_config_echo(cfg, out)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = cfg.datasets()?;
    let variant = if train.num_classes <= 10 { CifarVariant::Cifar10 } else { CifarVariant::Cifar100 };
    write_cifar(&out.join("train.bin"), &train, variant)?;
    write_cifar(&out.join("test.bin"), &test, variant)?;
    write_json(
        out,
        "data.json",
        &json!({
            "job": "gen-data",
            "source": train.source,
            "variant": format!("{variant:?}"),
            "train_records": train.len(),
            "test_records": test.len(),
            "train_histogram": train.class_histogram(),
            "test_histogram": test.class_histogram(),
        }),
    )?;
    write_config_echo(cfg, out)
}
