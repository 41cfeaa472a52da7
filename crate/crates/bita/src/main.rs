use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use bita::bench::{bench_mixer, to_csv};
use bita::config::{parse_mixer, RunConfig};
use bita::manifest::{load_manifest, load_manifests, save_manifest};
use bita::pipeline::run_stage;
use bita::{report_json, Checkpoint};
use bita_core::data::{generate_synthetic_dataset, SyntheticSpec};
use bita_core::model::BitaModel;
use bita_core::train::{evaluate, Stage, StepRecord};
use bita_core::MixerKind;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "bita", version, about = "Fourier-bridged image captioning on desk-scale data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest; repeat to train on several datasets jointly.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    /// Start from fresh weights instead of the previous stage.
    #[arg(long, conflicts_with = "from_checkpoint")]
    from_scratch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes-and-colors manifest.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Extra pairs with scenes disjoint from the main set.
        #[arg(long, default_value_t = 0)]
        heldout_n: usize,
        #[arg(long, requires = "heldout_n")]
        heldout_out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        grid_size: usize,
    },
    /// Contrastive alignment of the prompts and IFT against the frozen encoder.
    PretrainStage1(TrainArgs),
    /// Prefix language modeling through the frozen language model.
    PretrainStage2(TrainArgs),
    /// Stage-2 loop with the fine-tuning schedule.
    Finetune(TrainArgs),
    /// Beam-search captions for one image of a manifest.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Record id in the manifest.
        #[arg(long)]
        image: String,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 22)]
        max_len: usize,
    },
    /// BLEU, ROUGE-L and CIDEr of the best beam over a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 22)]
        max_len: usize,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Time one text-branch training iteration per mixer.
    BenchMixer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Parameter counts per group for one mixer.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mixer)]
        mixer: Option<MixerKind>,
    },
}

fn log_run(hash: &str, seed: u64) {
    eprintln!("config {hash} seed {seed}");
}

fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn write_out(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train_stage(stage: Stage, args: TrainArgs) -> anyhow::Result<()> {
    let init = match (&args.from_checkpoint, args.from_scratch, stage) {
        (Some(p), _, _) => Some(Checkpoint::load(p)?),
        (None, false, Stage::Stage2 | Stage::Finetune) => {
            bail!("{} needs --from-checkpoint or --from-scratch", stage.tag())
        }
        _ => None,
    };
    let mut cfg = RunConfig::load(args.config.as_deref(), Some(stage))?;
    if let (None, Some(ckpt)) = (&args.config, &init) {
        let seed = cfg.model.seed;
        cfg.model = ckpt.model.clone();
        cfg.model.seed = seed;
    }
    log_run(&cfg.hash(), cfg.model.seed);
    let data = load_manifests(&args.manifest)?;
    let every = cfg.log_every;
    let mut log = |r: &StepRecord| {
        if r.step % every == 0 {
            eprintln!("step {} epoch {} loss {:.6} lr {:.3e}", r.step, r.epoch, r.loss, r.lr);
        }
    };
    let (ckpt, report) = run_stage(stage, &cfg, &data, init.as_ref(), &mut log)?;
    let means: Vec<String> = report.epoch_means.iter().map(|m| format!("{m:.6}")).collect();
    eprintln!("epoch means {}", means.join(" "));
    write_out(&args.out, &ckpt.to_bytes())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, BitaModel)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, _) = ckpt.build()?;
    let cfg = RunConfig {
        model: ckpt.model.clone(),
        ..RunConfig::default()
    };
    log_run(&cfg.hash(), ckpt.model.seed);
    Ok((ckpt, model))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            n,
            seed,
            out,
            heldout_n,
            heldout_out,
            grid_size,
        } => {
            let spec = SyntheticSpec {
                grid_size,
                ..SyntheticSpec::default()
            };
            log_run(&short_hash(&format!("{spec:?} {n} {heldout_n}")), seed);
            let mut all = generate_synthetic_dataset(&spec, n + heldout_n, seed)?;
            let held = all.split_off(n);
            save_manifest(&out, &all)?;
            if let Some(path) = heldout_out {
                save_manifest(&path, &held)?;
            } else if heldout_n > 0 {
                bail!("--heldout-n needs --heldout-out");
            }
        }
        Command::PretrainStage1(a) => train_stage(Stage::Stage1, a)?,
        Command::PretrainStage2(a) => train_stage(Stage::Stage2, a)?,
        Command::Finetune(a) => train_stage(Stage::Finetune, a)?,
        Command::Caption {
            ckpt,
            manifest,
            image,
            beam,
            max_len,
        } => {
            let (ckpt, model) = load_model(&ckpt)?;
            let data = load_manifest(&manifest)?;
            let pair = data
                .iter()
                .find(|p| p.id == image)
                .ok_or_else(|| anyhow!("no record {image:?} in {}", manifest.display()))?;
            let captions = model.caption(&ckpt.vocabulary()?, &pair.image, beam, max_len)?;
            for (rank, c) in captions.iter().enumerate() {
                println!("{}\t{:.4}\t{}", rank + 1, c.score, c.text);
            }
        }
        Command::Evaluate {
            ckpt,
            manifest,
            beam,
            max_len,
            json_out,
        } => {
            let (ckpt, model) = load_model(&ckpt)?;
            let data = load_manifest(&manifest)?;
            let report = evaluate(&model, &ckpt.vocabulary()?, &data, beam, max_len)?;
            let json = report_json(&report);
            match json_out {
                Some(p) => write_out(&p, json.as_bytes())?,
                None => print!("{json}"),
            }
        }
        Command::BenchMixer {
            config,
            seq_lens,
            hidden,
            reps,
            batch,
            csv_out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), None)?;
            log_run(&cfg.hash(), cfg.model.seed);
            if reps == 0 || batch == 0 {
                bail!("--reps and --batch must be positive");
            }
            let csv = to_csv(&bench_mixer(&cfg.model, &seq_lens, hidden, reps, batch)?);
            match csv_out {
                Some(p) => write_out(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::CountParams { config, mixer } => {
            let mut cfg = RunConfig::load(config.as_deref(), None)?;
            if let Some(m) = mixer {
                cfg.model.mixer = m;
            }
            log_run(&cfg.hash(), cfg.model.seed);
            let model = BitaModel::new(cfg.model)?;
            for (group, n) in model.count_params(false) {
                println!("{group} {n}");
            }
            println!("trainable {}", model.total_params(true));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
