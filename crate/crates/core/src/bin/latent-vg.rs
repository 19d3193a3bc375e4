use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_vg::checkpoint;
use latent_vg::config::{Ablation, ModelConfig};
use latent_vg::data::{self, GenSettings};
use latent_vg::diagnostics;
use latent_vg::error::{Error, Result};
use latent_vg::eval;
use latent_vg::manifest::{MetricEntry, RunManifest};
use latent_vg::model::LatentVg;
use latent_vg::predictor::{self, PredictionRecord};
use latent_vg::train::{self, TrainConfig};

const MANIFEST_FILE: &str = "manifest.json";
const FINAL_CHECKPOINT: &str = "model.ckpt";
const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "latent-vg", version, about = "Referring segmentation with latent expressions")]
struct Cli {
    /// Seed for data generation, initialization, dropout and batching.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a split of the synthetic shapes benchmark.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0.0)]
        no_target_fraction: f64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model and write checkpoints, a loss log and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        input: ModelInput,
        /// Report file; defaults to `eval_<split>.txt` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Let no-target samples enter mIoU/oIoU as well.
        #[arg(long)]
        include_no_target: bool,
    },
    /// Write one JSON prediction per sample.
    Predict {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-expression attention grids and concept weights for a sample.
    AttnDump {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also render heat-map overlays as PPM images.
        #[arg(long)]
        overlay: bool,
    },
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Run directory for checkpoints, log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Model configuration file (`key = value` lines); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Train the no-target classifier (halves the learning rate).
    #[arg(long)]
    gres: bool,
    /// Disable a component: no-latent, no-sd, no-vci or no-margin.
    #[arg(long)]
    ablate: Vec<Ablation>,
    /// Write an intermediate checkpoint every this many steps (0: never).
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: usize,
    /// Split scored at every intermediate checkpoint and at the end.
    #[arg(long)]
    eval_split: Option<String>,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            count,
            out,
            split,
            no_target_fraction,
            image_size,
        } => gen_data(&out, &split, count as usize, cli.seed, no_target_fraction, image_size),
        Command::Train(args) => train_cmd(args, cli.seed),
        Command::Eval {
            input,
            out,
            include_no_target,
        } => eval_cmd(&input, out, include_no_target),
        Command::Predict { input, out } => predict_cmd(&input, &out),
        Command::AttnDump {
            input,
            sample,
            out,
            overlay,
        } => attn_dump_cmd(&input, sample, &out, overlay),
    }
}

fn gen_data(out: &Path, split: &str, count: usize, seed: u64, no_target: f64, image_size: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&no_target) {
        return Err(Error::Config(format!("no-target fraction {no_target} outside [0, 1]")));
    }
    let settings = GenSettings {
        image_hw: image_size,
        no_target_fraction: no_target,
        ..GenSettings::default()
    };
    let (samples, vocab) = data::generate_dataset(count, data::split_seed(seed, split), &settings)?;
    fs::create_dir_all(out)?;
    vocab.save(&out.join(data::VOCAB_FILE))?;
    data::write_split(&out.join(split), &samples)?;
    let no_target_count = samples.iter().filter(|s| s.no_target).count();
    println!(
        "wrote {count} samples ({no_target_count} without target) to {}",
        out.join(split).display()
    );
    println!("dataset hash {}", data::dataset_hash(out)?);
    Ok(())
}

fn train_cmd(args: TrainArgs, seed: u64) -> Result<()> {
    let dataset = data::load_dataset(&args.data, &args.split)?;
    let eval_set = match &args.eval_split {
        Some(s) => Some((s.clone(), data::read_split(&args.data.join(s))?)),
        None => None,
    };
    let dataset_hash = data::dataset_hash(&args.data)?;

    let mut config = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    config.seed = seed;
    config.gres_enabled |= args.gres;
    for &a in &args.ablate {
        config.apply(a);
    }
    if config.vocab_size < dataset.vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than the dataset vocabulary of {}",
            config.vocab_size,
            dataset.vocab.len()
        )));
    }
    let mut model = LatentVg::new(config.clone())?;

    fs::create_dir_all(&args.out)?;
    config.save(&args.out.join("config.txt"))?;
    let final_path = args.out.join(FINAL_CHECKPOINT);
    let mut manifest = RunManifest::new(config, seed, dataset_hash.clone(), final_path.clone());

    let tc = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        lr: args.lr,
        seed,
        log_every: args.log_every,
        ..TrainConfig::default()
    };
    println!(
        "training {} parameters for {} steps at lr {}",
        model.store.num_scalars(),
        tc.steps,
        tc.effective_lr(&model)
    );
    let mut log = BufWriter::new(fs::File::create(args.out.join(TRAIN_LOG))?);

    // Train in segments so checkpoints and evaluations happen in between
    // without disturbing the optimizer or the sampling order.
    let every = if args.checkpoint_every == 0 {
        tc.steps.max(1)
    } else {
        args.checkpoint_every
    };
    let mut session = train::Session::new(&model, &dataset.samples, &tc)?;
    while session.step() < tc.steps {
        let until = (session.step() + every).min(tc.steps);
        session.run_until(&mut model, until, Some(&mut log))?;
        log.flush()?;
        let step = session.step();
        let path = if step == tc.steps {
            final_path.clone()
        } else {
            args.out.join(format!("step_{step}.ckpt"))
        };
        checkpoint::save(&model, step, &path)?;
        if let Some((split, samples)) = &eval_set {
            let (report, _) = eval::evaluate(&model, samples, false)?;
            println!("step {step} {split}: {}", report.metrics.summary());
            manifest.record(MetricEntry {
                step,
                split: split.clone(),
                checkpoint: path,
                dataset_hash: dataset_hash.clone(),
                report,
            });
        } else {
            println!("step {step}: checkpoint {}", path.display());
        }
        manifest.save(&args.out.join(MANIFEST_FILE))?;
    }
    if tc.steps == 0 {
        checkpoint::save(&model, 0, &final_path)?;
        manifest.save(&args.out.join(MANIFEST_FILE))?;
    }
    Ok(())
}

fn load_input(input: &ModelInput) -> Result<(LatentVg, usize, data::Dataset)> {
    let (model, step) = checkpoint::load(&input.checkpoint)?;
    let dataset = data::load_dataset(&input.data, &input.split)?;
    Ok((model, step, dataset))
}

fn eval_cmd(input: &ModelInput, out: Option<PathBuf>, include_no_target: bool) -> Result<()> {
    let (model, step, dataset) = load_input(input)?;
    let hash = data::dataset_hash(&input.data)?;
    let (report, _) = eval::evaluate(&model, &dataset.samples, include_no_target)?;
    let out = out.unwrap_or_else(|| {
        input
            .checkpoint
            .with_file_name(format!("eval_{}.txt", input.split))
    });
    let mut text = format!(
        "checkpoint = {}\nstep = {step}\nsplit = {}\ndataset_hash = {hash}\n",
        input.checkpoint.display(),
        input.split
    );
    text.push_str(&report.to_report_string());
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, text)?;
    println!("{}", report.metrics.summary());
    println!("report written to {}", out.display());

    let manifest_path = input.checkpoint.with_file_name(MANIFEST_FILE);
    if manifest_path.exists() {
        let mut manifest = RunManifest::load(&manifest_path)?;
        manifest.record(MetricEntry {
            step,
            split: input.split.clone(),
            checkpoint: input.checkpoint.clone(),
            dataset_hash: hash,
            report,
        });
        manifest.save(&manifest_path)?;
    }
    Ok(())
}

fn predict_cmd(input: &ModelInput, out: &Path) -> Result<()> {
    let (model, _, dataset) = load_input(input)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(out)?);
    for s in &dataset.samples {
        let pred = predictor::predict(&model, &s.image, &s.token_ids)?;
        serde_json::to_writer(&mut w, &PredictionRecord::new(s.id, &pred))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{} predictions written to {}", dataset.samples.len(), out.display());
    Ok(())
}

fn attn_dump_cmd(input: &ModelInput, sample: usize, out: &Path, overlay: bool) -> Result<()> {
    let (model, _, dataset) = load_input(input)?;
    let s = dataset
        .samples
        .iter()
        .find(|s| s.id == sample)
        .ok_or_else(|| Error::MissingArtifact(input.data.join(&input.split).join(format!("sample {sample}"))))?;
    let dump = diagnostics::attention_dump(&model, &s.image, &s.token_ids)?;
    let files = diagnostics::write_dump(out, &dump, overlay.then_some(&s.image))?;
    println!("\"{}\": {} grids, {} files in {}", s.expression, dump.grids.len(), files.len(), out.display());
    Ok(())
}
