use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use facenet::checkpoint::Checkpoint;
use facenet::data::{self, Spectrum};
use facenet::evaluator;
use facenet::pseudo_label;
use facenet::synth::{self, SynthConfig};
use facenet::trainer::{self, Progress, TrainConfig, TrainState};
use facenet::visualize;

#[derive(Parser)]
#[command(name = "facenet", version, about = "Flare-aware multi-spectral vehicle re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB/NI/TI dataset with injected flares.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset root.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Write pseudo_labels.csv (bright-pixel fractions and flare flags).
    Pseudolabel {
        root: PathBuf,
        #[arg(long, default_value_t = pseudo_label::DEFAULT_BAR)]
        bar: f64,
        /// Defaults to <root>/pseudo_labels.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, loss log and metrics into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a loss line every N steps (0 disables).
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Score a checkpoint; writes metrics.json and ranking.csv into --out.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write flare-mask heatmaps over the RGB and NI images.
    VisualizeMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of samples to render.
        #[arg(long, default_value_t = 16)]
        limit: usize,
        /// Only render samples whose pseudo-label marks a flare.
        #[arg(long)]
        flared_only: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { config, out } => generate(&config, &out),
        Command::Pseudolabel { root, bar, out } => pseudolabel(&root, bar, out),
        Command::Train {
            config,
            data,
            out,
            resume,
            log_every,
        } => train(&config, &data, &out, resume.as_deref(), log_every),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, &out),
        Command::VisualizeMasks {
            ckpt,
            data,
            out,
            limit,
            flared_only,
        } => visualize_masks(&ckpt, &data, &out, limit, flared_only),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn generate(config: &Path, out: &Path) -> Result<()> {
    let cfg = SynthConfig::parse(&read(config)?).with_context(|| format!("parsing {}", config.display()))?;
    let (manifest, truths) = synth::generate(&cfg, out)?;
    let flared = truths.iter().filter(|t| t.flare_applied_rgb || t.flare_applied_ni).count();
    println!(
        "wrote {} ({} samples, {flared} flared)",
        manifest.display(),
        cfg.num_identities * cfg.samples_per_identity
    );
    Ok(())
}

fn pseudolabel(root: &Path, bar: f64, out: Option<PathBuf>) -> Result<()> {
    if !(0.0..=1.0).contains(&bar) {
        bail!("--bar must lie in [0, 1]");
    }
    let triplets = data::load_dataset(root, data::native_size(root)?)?;
    let out = out.unwrap_or_else(|| root.join("pseudo_labels.csv"));
    let n = pseudo_label::write_pseudo_labels(&out, &triplets, bar)?;
    println!("wrote {} ({n} samples)", out.display());
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, log_every: usize) -> Result<()> {
    let cfg = TrainConfig::parse(&read(config)?).with_context(|| format!("parsing {}", config.display()))?;
    let run = trainer::run(&cfg, data, out, resume, &mut |p| match p {
        Progress::Step { epoch, step, loss } if log_every > 0 && step % log_every == 0 => {
            println!("epoch {epoch} step {step} {loss}");
        }
        Progress::Eval { epoch, metrics } => {
            println!(
                "epoch {epoch} eval mAP={:.4} R1={:.4} R5={:.4} R10={:.4}",
                metrics.map, metrics.r1, metrics.r5, metrics.r10
            );
        }
        _ => {}
    })?;
    println!("checkpoint: {}", run.checkpoint.display());
    Ok(())
}

fn load_state(ckpt: &Path) -> Result<TrainState> {
    let c = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(TrainState::from_checkpoint(c)?)
}

fn eval(ckpt: &Path, data_root: &Path, out: &Path) -> Result<()> {
    let state = load_state(ckpt)?;
    let all = data::load_dataset(data_root, state.config.input_size())?;
    let (queries, gallery) = trainer::eval_sets(&all);
    let (m, rankings) = trainer::evaluate_model(&state.model, &state.store, &queries, &gallery, state.config.eval_batch_size)?;
    std::fs::create_dir_all(out)?;
    evaluator::write_metrics_json(&out.join(trainer::METRICS_FILE), &m)?;
    evaluator::write_ranking_csv(&out.join(trainer::RANKING_FILE), &rankings)?;
    println!(
        "mAP={:.4} R1={:.4} R5={:.4} R10={:.4} ({} queries, {} dropped)",
        m.map, m.r1, m.r5, m.r10, m.queries, m.dropped_queries
    );
    Ok(())
}

fn visualize_masks(ckpt: &Path, data_root: &Path, out: &Path, limit: usize, flared_only: bool) -> Result<()> {
    let state = load_state(ckpt)?;
    if !state.config.ablation.use_mfmp {
        bail!("checkpoint was trained without mask prediction (use_mfmp = false)");
    }
    let all = data::load_dataset(data_root, state.config.input_size())?;
    let mut seen = std::collections::BTreeSet::new();
    let mut chosen = Vec::new();
    for t in &all {
        if chosen.len() == limit {
            break;
        }
        if !seen.insert(t.sample_id.as_str()) {
            continue;
        }
        if flared_only && !pseudo_label::SamplePseudoLabels::of(t, state.config.pseudo_label_bar)?.is_flare() {
            continue;
        }
        chosen.push(t);
    }
    std::fs::create_dir_all(out)?;
    let mut written = 0;
    for part in chosen.chunks(state.config.eval_batch_size) {
        let Some(masks) = state.model.masks(&state.store, part)? else { break };
        for (i, t) in part.iter().enumerate() {
            for (mask, spectrum) in masks.iter().zip([Spectrum::Rgb, Spectrum::Ni]) {
                let base = match spectrum {
                    Spectrum::Rgb => visualize::grey(&t.rgb),
                    _ => t.ni.clone(),
                };
                let plane = visualize::mask_plane(&mask.soft, i)?;
                let path = out.join(format!("{}_{}.png", t.sample_id, spectrum.as_str()));
                visualize::overlay(&base, &plane, 0.5)
                    .save(&path)
                    .with_context(|| format!("writing {}", path.display()))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} heatmaps to {}", out.display());
    Ok(())
}
