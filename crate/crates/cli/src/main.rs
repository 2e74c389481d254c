use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use insightr_core::checkpoint::Checkpoint;
use insightr_core::config::{RunConfig, TEMPLATE};
use insightr_core::metrics::{evaluate, explain, pca_embed, Explanation};
use insightr_core::pipeline::{ablate, train};
use insightr_core::render::{histogram_svg, pgm, scatter_svg};
use insightr_core::selfcheck::{model_grad_suites, GRAD_TOLERANCE};
use insightr_core::synth::{generate, SynthDataset, LABEL_OFFSET};
use serde::Serialize;

const OUT_ROOT_ENV: &str = "INSIGHTR_OUT_ROOT";
const THREADS_ENV: &str = "INSIGHTR_THREADS";
const TRAIN_FILE: &str = "train.insd";
const TEST_FILE: &str = "test.insd";
const CHECKPOINT_FILE: &str = "checkpoint.insck";

/// Prototype-based interpretable regression on synthetic images.
#[derive(Parser)]
#[command(name = "insightr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the documented default configuration.
    ConfigTemplate,
    /// Generate train.insd and test.insd.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the training protocol on DATA/train.insd.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.insd (and optionally test.insd).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample explanations with activation maps.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sample_ids: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D PCA of prototypes and nearby latent patches, plus usage histogram.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_sample: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the ablation matrix.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.insd and test.insd.
        #[arg(long)]
        data: PathBuf,
        /// Seeds per cell; overrides ablation.seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group.
    GradCheck {
        /// Defaults to the built-in tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Coordinates probed per tensor; all when omitted.
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ConfigTemplate => "config-template",
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Explain { .. } => "explain",
            Command::Embed { .. } => "embed",
            Command::Ablate { .. } => "ablate",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
        cfg.paths.out_root = root;
    }
    Ok(cfg)
}

/// `--out` if given, otherwise `<out_root>/<command>`.
fn out_dir(out: Option<PathBuf>, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| cfg.paths.out_root.clone());
    let dir = out.unwrap_or_else(|| Path::new(&root).join(command));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())
        .with_context(|| format!("writing {}", dir.join("config.toml").display()))?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut ck = Checkpoint::load(path)?;
    if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
        ck.config.paths.out_root = root;
    }
    Ok(ck)
}

fn gen_data(config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let dir = out_dir(out, &cfg, "data")?;
    let (train, test) = generate(&cfg.data)?;
    train.save(&dir.join(TRAIN_FILE))?;
    test.save(&dir.join(TEST_FILE))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), dir.display());
    Ok(())
}

fn run_train(config: Option<PathBuf>, data: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let train_set = SynthDataset::load(&data.join(TRAIN_FILE))?;
    let dir = out_dir(out, &cfg, "train")?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let (model, log) = train(&cfg, &train_set, |model, state| {
        Checkpoint {
            config: cfg.clone(),
            cursor: *state,
            model: model.clone(),
        }
        .save(&ck_path)?;
        eprintln!("cycle {} {} done (epoch {})", state.cycle, state.stage.name(), state.epoch);
        Ok(())
    })?;
    if cfg.schedule.cycles == 0 {
        Checkpoint {
            config: cfg.clone(),
            cursor: insightr_core::trainer::StageState::start(),
            model: model.clone(),
        }
        .save(&ck_path)?;
    }
    write(&dir.join("training_log.csv"), log.to_csv())?;
    write_json(&dir.join("projections.json"), &log.projections)?;
    let train_eval = evaluate(&model, &train_set)?;
    write_json(&dir.join("train_metrics.json"), &train_eval.metrics)?;
    let test_path = data.join(TEST_FILE);
    if test_path.exists() {
        let test_eval = evaluate(&model, &SynthDataset::load(&test_path)?)?;
        write_json(&dir.join("test_metrics.json"), &test_eval.metrics)?;
        println!("test MAE {:.4}, accuracy {:.4}", test_eval.metrics.mae, test_eval.metrics.accuracy);
    }
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}

fn run_eval(checkpoint: PathBuf, data: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(&checkpoint)?;
    let set = SynthDataset::load(&data)?;
    let dir = out_dir(out, &ck.config, "eval")?;
    let e = evaluate(&ck.model, &set)?;
    write_json(&dir.join("metrics.json"), &e.metrics)?;
    write(&dir.join("samples.csv"), e.samples_csv())?;
    println!(
        "MAE {:.4}, accuracy {:.4}, s_spars {:.3}, diversity {}",
        e.metrics.mae, e.metrics.accuracy, e.metrics.sparsity, e.metrics.diversity
    );
    Ok(())
}

fn write_maps(dir: &Path, set: &SynthDataset, e: &Explanation) -> Result<()> {
    let (h, w) = e.input_grid;
    let image = &set.image(e.sample)[..h * w];
    write(&dir.join(format!("sample{}_input.pgm", e.sample)), pgm(image, w, h))?;
    for r in e.top() {
        write(
            &dir.join(format!("sample{}_proto{}.pgm", e.sample, r.prototype)),
            pgm(&r.upsampled, w, h),
        )?;
    }
    Ok(())
}

fn run_explain(checkpoint: PathBuf, data: PathBuf, ids: Vec<usize>, top_k: usize, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(&checkpoint)?;
    let set = SynthDataset::load(&data)?;
    let dir = out_dir(out, &ck.config, "explain")?;
    for id in ids {
        let e = explain(&ck.model, &set, id, top_k)?;
        if let Some(w) = &e.warning {
            eprintln!("warning: {w}");
        }
        write_json(&dir.join(format!("explanation_{id}.json")), &e)?;
        write_maps(&dir, &set, &e)?;
        let top: Vec<String> = e
            .top()
            .iter()
            .map(|r| format!("#{} (label {:.2}, {:.1}%)", r.prototype, r.label - LABEL_OFFSET, 100.0 * r.fraction))
            .collect();
        println!(
            "sample {id}: prediction {:.3}, label {:.3}; top-3 share {:.1}%; {}",
            e.prediction,
            e.label,
            100.0 * e.top3_fraction,
            top.join(", ")
        );
    }
    Ok(())
}

fn run_embed(checkpoint: PathBuf, data: PathBuf, per_sample: usize, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(&checkpoint)?;
    let set = SynthDataset::load(&data)?;
    let dir = out_dir(out, &ck.config, "embed")?;
    let report = pca_embed(&ck.model, &set, per_sample)?;
    write(&dir.join("embedding.csv"), report.to_csv())?;
    write(&dir.join("embedding.svg"), scatter_svg(&report))?;
    write(&dir.join("usage.svg"), histogram_svg(&report.usage))?;
    write_json(
        &dir.join("embedding.json"),
        &serde_json::json!({
            "explained_variance": report.explained_variance,
            "usage": report.usage,
        }),
    )?;
    println!(
        "{} points; explained variance {:.3}, {:.3}",
        report.points.len(),
        report.explained_variance[0],
        report.explained_variance[1]
    );
    Ok(())
}

fn run_ablate(config: Option<PathBuf>, data: PathBuf, seeds: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seeds {
        if s == 0 {
            bail!("--seeds must be at least 1");
        }
        cfg.ablation.seeds = Some(s);
    }
    let train_set = SynthDataset::load(&data.join(TRAIN_FILE))?;
    let test_set = SynthDataset::load(&data.join(TEST_FILE))?;
    let dir = out_dir(out, &cfg, "ablate")?;
    let table = ablate(&cfg, &train_set, &test_set)?;
    write(&dir.join("ablation.csv"), table.to_csv())?;
    let md = table.to_markdown();
    write(&dir.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn run_grad_check(config: Option<PathBuf>, batch: usize, max_coords: Option<usize>) -> Result<bool> {
    let cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::tiny(),
    };
    let suites = model_grad_suites(&cfg, batch, max_coords)?;
    let mut ok = true;
    for s in &suites {
        ok &= s.passed;
        println!(
            "{} {:<28} max rel error {:.3e} over {} coords (tolerance {GRAD_TOLERANCE:e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.max_rel_error,
            s.coords
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    if let Ok(n) = std::env::var(THREADS_ENV) {
        let n: usize = n.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::ConfigTemplate => print!("{TEMPLATE}"),
        Command::GenData { config, out } => gen_data(config, out)?,
        Command::Train { config, data, out } => run_train(config, data, out)?,
        Command::Eval { checkpoint, data, out } => run_eval(checkpoint, data, out)?,
        Command::Explain {
            checkpoint,
            data,
            sample_ids,
            top_k,
            out,
        } => run_explain(checkpoint, data, sample_ids, top_k, out)?,
        Command::Embed {
            checkpoint,
            data,
            per_sample,
            out,
        } => run_embed(checkpoint, data, per_sample, out)?,
        Command::Ablate { config, data, seeds, out } => run_ablate(config, data, seeds, out)?,
        Command::GradCheck {
            config,
            batch,
            max_coords,
        } => return run_grad_check(config, batch, max_coords),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "command": name, "error": format!("{e:#}") }));
            ExitCode::from(2)
        }
    }
}
