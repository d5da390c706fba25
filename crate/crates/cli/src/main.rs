use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use picr_core::checkpoint::Checkpoint;
use picr_core::config::{Config, ABLATIONS};
use picr_core::data::{generate_sample, load_dataset, load_gray, load_rgb, save_gray, synthetic_dataset, write_sample, Quality, Sample};
use picr_core::eval::{evaluate, infer};
use picr_core::gradcheck::{run_full, run_modules, run_ops, CaseReport, GradCheckConfig, Scope};
use picr_core::metrics::{mae, EvalReport, ImageScores};
use picr_core::model::PicrNet;
use picr_core::train::Trainer;

fn ablation_help() -> String {
    let mut s = String::from("Apply an ablation variant to the configuration:\n");
    for (id, name, assignment) in ABLATIONS {
        s.push_str(&format!("  {id:>2}  {name:<20} {assignment}\n"));
    }
    s
}

#[derive(Parser)]
#[command(name = "picr", version, about = "RGB-D salient object detection: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic samples to <out>/{rgb,depth,gt}.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or precomputed maps) on a dataset.
    Eval(EvalArgs),
    /// Predict the saliency map of one image pair.
    Infer(InferArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset: toy or faithful.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Config file of `key = value` lines applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_name = "ID", long_help = ablation_help())]
    ablation: Option<u8>,
    /// Random seed.
    #[arg(long, env = "PICR_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.merge_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(id) = self.ablation {
            cfg.apply_ablation(id)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with rgb/, depth/ and gt/ subdirectories.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N freshly generated synthetic samples instead of a directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// First seed of the synthetic samples.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Side of the synthetic samples (defaults to the model input size).
    #[arg(long)]
    size: Option<usize>,
}

impl DataArgs {
    fn load(&self, size: usize) -> Result<Vec<Sample>> {
        match (&self.data, self.synthetic) {
            (Some(dir), _) => {
                let data = load_dataset(dir)?;
                if data.is_empty() {
                    bail!("no samples found under {}", dir.display());
                }
                Ok(data)
            }
            (None, Some(n)) => Ok(synthetic_dataset(n, self.data_seed, self.size.unwrap_or(size))?),
            (None, None) => bail!("give either --data DIR or --synthetic N"),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "PICR_SEED", default_value_t = 0)]
    seed: u64,
    /// good or degraded.
    #[arg(long, default_value = "good")]
    quality: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written at the end of training.
    #[arg(long, default_value = "picr.ckpt")]
    out: PathBuf,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed maps `<name>.png` to score instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Per-image CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write each prediction to DIR/<name>.png.
    #[arg(long, value_name = "DIR")]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long, default_value = "saliency.png")]
    out: PathBuf,
    /// Ground truth; prints the MAE of the prediction when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// op, module or full.
    #[arg(long, default_value = "op")]
    scope: String,
    /// Run a single named case.
    #[arg(long)]
    case: Option<String>,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 5)]
    probes: usize,
    /// Input size for the full scope.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let quality: Quality = a.quality.parse()?;
    for i in 0..a.count as u64 {
        let s = generate_sample(a.seed.wrapping_add(i), (a.size, a.size), quality)?;
        write_sample(&a.out, &s)?;
    }
    println!("wrote {} {quality} samples of {}x{} to {}", a.count, a.size, a.size, a.out.display());
    Ok(())
}

fn epoch_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("picr");
    out.with_file_name(format!("{stem}_epoch{epoch}.ckpt"))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
        None => Trainer::new(a.config.resolve()?)?,
    };
    let data = a.data.load(trainer.config.model.input_size)?;
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::sink()),
    };
    let every = trainer.config.optim.checkpoint_every;
    let out = a.out.clone();
    let start = Instant::now();
    let reports = trainer.run(&data, log.as_mut(), |t, epoch| {
        if every > 0 && epoch % every == 0 {
            t.checkpoint().save(&epoch_path(&out, epoch))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&a.out)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!(
            "trained {} steps in {:.1}s: loss {:.5} -> {:.5}; checkpoint {}",
            reports.len(),
            start.elapsed().as_secs_f64(),
            first.total,
            last.total,
            a.out.display()
        );
    } else {
        println!("nothing to train; checkpoint {}", a.out.display());
    }
    Ok(())
}

fn score_predictions(dir: &Path, data: &[Sample]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for s in data {
        let path = dir.join(format!("{}.png", s.name));
        let pred = load_gray(&path)?;
        rows.push(ImageScores::compute(s.name.clone(), &pred, &s.gt)?);
    }
    Ok(EvalReport::from_rows(rows))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let (net, mut params) = PicrNet::build(&ck.config.model, ck.config.seed)?;
            ck.restore(&ck.config, &mut params)?;
            let data = a.data.load(ck.config.model.input_size)?;
            evaluate(&net, &params, &data, a.dump.as_deref())?
        }
        (None, Some(dir)) => {
            let data = a.data.load(64)?;
            score_predictions(dir, &data)?
        }
        (None, None) => bail!("give --checkpoint or --predictions"),
    };
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (net, mut params) = PicrNet::build(&ck.config.model, ck.config.seed)?;
    ck.restore(&ck.config, &mut params)?;
    let rgb = load_rgb(&a.rgb)?;
    let depth = load_gray(&a.depth)?;
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let pred = infer(&net, &params, &rgb, &depth.reshape([1, h, w])?)?;
    save_gray(&pred, &a.out)?;
    println!("wrote {}x{} saliency map to {}", w, h, a.out.display());
    if let Some(gt) = &a.gt {
        let g = load_gray(gt)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        println!("mae={:.6}", mae(&pred, &g)?);
    }
    Ok(())
}

fn print_table(cases: &[CaseReport]) -> bool {
    println!("{:<22} {:>7} {:>6} {:>12}  result", "case", "probes", "kinks", "max_rel_err");
    let mut ok = true;
    for c in cases {
        let r = &c.report;
        let kinks: usize = r.tensors.iter().map(|t| t.kinks).sum();
        let pass = r.passed();
        ok &= pass;
        println!(
            "{:<22} {:>7} {:>6} {:>12.3e}  {}",
            c.name,
            r.num_probes(),
            kinks,
            r.max_rel_error(),
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            for t in r.tensors.iter().filter(|t| t.max_rel_error() >= r.tolerance || t.probes.is_empty()) {
                println!("    {:<40} {:.3e} ({} probes)", t.name, t.max_rel_error(), t.probes.len());
            }
        }
    }
    ok
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let cfg = a.config.resolve()?;
    let gc = GradCheckConfig {
        probes: a.probes,
        seed: cfg.seed,
        ..Default::default()
    };
    let scope: Scope = a.scope.parse()?;
    let start = Instant::now();
    let cases = match scope {
        Scope::Op => run_ops(&gc, a.case.as_deref())?,
        Scope::Module => run_modules(&gc, a.case.as_deref())?,
        Scope::Full => {
            let mut model = cfg.model.clone();
            model.input_size = a.size;
            vec![run_full(&model, &gc)?]
        }
    };
    let ok = print_table(&cases);
    println!(
        "scope {scope}: {} in {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a).and_then(|ok| if ok { Ok(()) } else { bail!("gradient check failed") }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
