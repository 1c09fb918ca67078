use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prosma::ablation::{run_ablation, AblationConfig};
use prosma::autodiff::Tape;
use prosma::checkpoint::{load_checkpoint, save_checkpoint};
use prosma::data::{generate, Clutter, Dataset, Split, SplitRule, SynthConfig};
use prosma::gate::soft_threshold_scalar;
use prosma::model::{forward, ModelConfig, ModelParams};
use prosma::optim::AdamConfig;
use prosma::pgm::{quantize, read_pgm, write_pgm, GrayImage};
use prosma::train::{evaluate, predict, train, TrainConfig};
use prosma::verify::{gradcheck, theorem_check, Sabotage, Scope};
use prosma::{Error, GateVariant, Tensor};

#[derive(Parser)]
#[command(name = "prosma", version, about = "Proximal sparse skip gating for U-Net segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation corpus.
    GenData(GenData),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Train plain, ss-only, cg-only and full variants over several seeds.
    Ablate(AblateArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Check the soft-thresholding properties on random trials.
    TheoremCheck(TheoremArgs),
    /// Soft-threshold a list of values.
    ProxDemo(ProxArgs),
    /// Dump gate masks, thresholds and sparsity for one image.
    InspectGate(InspectArgs),
}

#[derive(Args, Serialize)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "high")]
    clutter: Clutter,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    /// Exact split sizes instead of 70/15/15; all three must be given.
    #[arg(long, requires_all = ["val", "test"])]
    train: Option<usize>,
    #[arg(long, requires_all = ["train", "test"])]
    val: Option<usize>,
    #[arg(long, requires_all = ["train", "val"])]
    test: Option<usize>,
}

#[derive(Args, Serialize, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
}

#[derive(Args, Serialize, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "full")]
    variant: GateVariant,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    #[serde(serialize_with = "split_name")]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of variants (default: plain,ss-only,cg-only,full).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<GateVariant>>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value = "ops")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TheoremArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "none", hide = true)]
    sabotage: Sabotage,
}

#[derive(Args, Serialize)]
struct ProxArgs {
    #[arg(long, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    values: Vec<f64>,
}

#[derive(Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, Error> {
    s.parse()
}

fn split_name<S: serde::Serializer>(s: &Split, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(s.as_str())
}

/// Outcome of a subcommand that ran to completion.
enum Verdict {
    Ok,
    Failed,
}

fn announce(name: &str, args: &impl Serialize) -> Result<(), Error> {
    println!("config {name} {}", serde_json::to_string(args)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_config(epochs: usize, seed: u64, o: &OptimArgs) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: o.batch_size,
        adam: AdamConfig {
            lr: o.lr,
            ..AdamConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

fn gen_data(a: &GenData) -> Result<Verdict, Error> {
    let split = match (a.train, a.val, a.test) {
        (Some(train), Some(val), Some(test)) => SplitRule::Counts { train, val, test },
        _ => SplitRule::default(),
    };
    let cfg = SynthConfig {
        size: a.size,
        count: a.count,
        seed: a.seed,
        clutter: a.clutter,
        noise_sigma: a.noise,
        split,
        ..SynthConfig::default()
    };
    announce("gen-data", &cfg)?;
    let ds = generate(&cfg)?;
    ds.save(&a.out)?;
    for split in Split::ALL {
        println!("{}.txt: {} lines", split.as_str(), ds.indices(split).len());
    }
    println!("wrote {} images and {} masks to {}", ds.samples.len(), ds.samples.len(), a.out.display());
    Ok(Verdict::Ok)
}

fn train_cmd(a: &TrainArgs) -> Result<Verdict, Error> {
    let model = ModelConfig::default()
        .with_base_channels(a.model.base_channels)
        .with_variant(a.variant);
    let tc = train_config(a.epochs, a.seed, &a.optim);
    announce("train", &serde_json::json!({ "args": a, "model": model, "train": tc }))?;
    let ds = Dataset::load(&a.data)?;
    let init = ModelParams::init(model, a.seed)?;
    println!("parameters: {}", init.num_scalars());
    let out = train(init, &ds, &tc, |r| {
        println!(
            "epoch {:>3}  loss {:.6}  val IoU {:.4}  val F1 {:.4}",
            r.epoch, r.train_loss, r.val_mean_iou, r.val_mean_f1
        )
    })?;
    save_checkpoint(&a.out, &out.best)?;
    let history_path = PathBuf::from(format!("{}.history.json", a.out.display()));
    write_json(
        &history_path,
        &serde_json::json!({
            "best_epoch": out.best_epoch,
            "loss": out.loss_curve(),
            "epochs": out.history,
        }),
    )?;
    println!(
        "best epoch {} written to {}; history in {}",
        out.best_epoch,
        a.out.display(),
        history_path.display()
    );
    Ok(Verdict::Ok)
}

fn eval_cmd(a: &EvalArgs) -> Result<Verdict, Error> {
    announce("eval", a)?;
    let params = load_checkpoint(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let report = evaluate(&params, &ds.split(a.split), a.threshold)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(p) = &a.out {
        std::fs::write(p, json + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(Verdict::Ok)
}

fn ablate_cmd(a: &AblateArgs) -> Result<Verdict, Error> {
    let model = ModelConfig::default().with_base_channels(a.model.base_channels);
    let mut cfg = AblationConfig::new(model, train_config(a.epochs, 0, &a.optim), a.seeds);
    if let Some(v) = &a.variants {
        cfg.variants = v.clone();
    }
    announce("ablate", &cfg)?;
    let ds = Dataset::load(&a.data)?;
    let report = run_ablation(&ds, &cfg, |v, s, r| {
        if r.epoch == cfg.train.epochs {
            println!("{v} seed {s}: {} epochs done, last val F1 {:.4}", r.epoch, r.val_mean_f1);
        }
    })?;
    print!("{}", report.table());
    write_json(&a.out, &report)?;
    match report.verdict() {
        Some(line) => {
            println!("{line}");
            Ok(if report.margin().is_some_and(|m| m > 0.0) {
                Verdict::Ok
            } else {
                Verdict::Failed
            })
        }
        None => {
            println!("DIRECTION full>plain: not evaluated (both variants are required)");
            Ok(Verdict::Ok)
        }
    }
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Verdict, Error> {
    announce("gradcheck", a)?;
    let start = std::time::Instant::now();
    let report = gradcheck(a.scope, a.seed)?;
    for c in &report.cases {
        println!(
            "{:<5} {:<32} max_rel_err {:.3e}  checked {:>5}  skipped {:>3}  rejected draws {:>3}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.checked,
            c.skipped,
            c.rejected_trials
        );
    }
    println!(
        "scope {}: {} cases, tolerance {:e}, kink skips {}, {:.1}s",
        report.scope,
        report.cases.len(),
        a.scope.tolerance(),
        report.skipped(),
        start.elapsed().as_secs_f64()
    );
    Ok(if report.passed() { Verdict::Ok } else { Verdict::Failed })
}

fn theorem_cmd(a: &TheoremArgs) -> Result<Verdict, Error> {
    announce("theorem-check", a)?;
    let report = theorem_check(a.trials, a.seed, a.sabotage)?;
    for p in &report.properties {
        println!(
            "{:<16} {}/{} passed{}",
            p.name,
            p.trials - p.violations,
            p.trials,
            p.first_violation
                .as_deref()
                .map(|v| format!("  first violation: {v}"))
                .unwrap_or_default()
        );
    }
    Ok(if report.passed() { Verdict::Ok } else { Verdict::Failed })
}

fn prox_cmd(a: &ProxArgs) -> Result<Verdict, Error> {
    announce("prox-demo", a)?;
    if !(a.lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be non-negative, got {}", a.lambda)));
    }
    let out: Vec<String> = a
        .values
        .iter()
        .map(|&v| soft_threshold_scalar(v, a.lambda).to_string())
        .collect();
    println!("{}", out.join(","));
    Ok(Verdict::Ok)
}

fn inspect_cmd(a: &InspectArgs) -> Result<Verdict, Error> {
    announce("inspect-gate", a)?;
    let params = load_checkpoint(&a.ckpt)?;
    let img = read_pgm(&a.image)?;
    let x = img.to_tensor().reshape(&[1, 1, img.height, img.width])?;
    create_dir(&a.out)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward(&params.config, &mut tape, &bound, xv)?;
    let mut stages = Vec::new();
    for (stage, trace) in &out.traces {
        let r = trace.report(&tape)?;
        let psi = r.psi.data();
        let (lo, hi) = psi
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let heat = GrayImage::from_tensor(&r.psi)?;
        let path = a.out.join(format!("psi_stage{stage}.pgm"));
        write_pgm(&path, &heat)?;
        let zf = &r.zero_fraction_per_channel;
        println!(
            "stage {stage}: psi {}x{} min {lo:.4} max {hi:.4} (bytes {}..{}), mean lambda {}, mean zero fraction {}",
            heat.width,
            heat.height,
            quantize(lo),
            quantize(hi),
            mean_or_na(&r.lambda),
            mean_or_na(zf),
        );
        stages.push(serde_json::json!({
            "stage": stage,
            "variant": r.variant,
            "psi_min": lo,
            "psi_max": hi,
            "psi_pgm": path,
            "lambda": r.lambda,
            "zero_fraction_per_channel": zf,
            "channel_gate": r.channel_gate.data(),
        }));
    }
    let prob = predict(&params, &[&prosma::data::Sample {
        id: "input".into(),
        image: img.to_tensor(),
        mask: Tensor::zeros(&[1, img.height, img.width])?,
    }])?;
    let mask: Vec<f64> = prob.data().iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_values(&[1, img.height, img.width], mask)?;
    write_pgm(a.out.join("pred_mask.pgm"), &GrayImage::from_tensor(&mask)?)?;
    write_json(&a.out.join("gate_report.json"), &serde_json::json!({ "stages": stages }))?;
    println!(
        "foreground fraction {:.4}; report in {}",
        mask.sum() / mask.len() as f64,
        a.out.join("gate_report.json").display()
    );
    Ok(Verdict::Ok)
}

fn mean_or_na(v: &[f64]) -> String {
    if v.is_empty() {
        "n/a".into()
    } else {
        format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::TheoremCheck(a) => theorem_cmd(a),
        Command::ProxDemo(a) => prox_cmd(a),
        Command::InspectGate(a) => inspect_cmd(a),
    };
    match result {
        Ok(Verdict::Ok) => ExitCode::SUCCESS,
        Ok(Verdict::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
