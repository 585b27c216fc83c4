use clap::{Parser, Subcommand};
use sonalign::data::{fold_split, load_esc50, load_us8k, ClipSource, Sample};
use sonalign::dsp::Waveform;
use sonalign::error::{Error, Result};
use sonalign::text::{BpeVocab, PromptTemplate};
use sonalign::train::{
    ablation_table, evaluate, load_checkpoint, prompt_ablation, save_checkpoint, synth_dataset,
    train, TrainConfig,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sonalign",
    about = "Audio classification by aligning clip and label-semantics embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write a checkpoint.
    Train {
        /// Dataset: esc50, us8k, or synth.
        #[arg(long)]
        dataset: String,
        /// Dataset root directory (unused for synth).
        #[arg(long)]
        root: Option<PathBuf>,
        /// 1-based fold held out for evaluation.
        #[arg(long)]
        fold: Option<usize>,
        /// `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// BPE vocabulary file; a small built-in is used when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one held-out fold and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Report CSV output path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Classify one WAV file against a list of labels.
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Text file with one class label per line.
        #[arg(long)]
        labels: PathBuf,
        /// Prompt template override, e.g. "a clip of {}".
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train and evaluate the synthetic set once per (template, seed) and
    /// print a mean +- std accuracy table.
    AblatePrompts {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text file with one prompt template per line.
        #[arg(long)]
        templates: PathBuf,
        /// Comma-separated seed list, e.g. 0,1,2.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits nonzero on failure.
    Gradcheck,
}

fn load_vocab(path: &Option<PathBuf>) -> Result<BpeVocab> {
    match path {
        Some(p) => BpeVocab::load(p),
        None => Ok(BpeVocab::builtin_small()),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_dataset(
    name: &str,
    root: &Option<PathBuf>,
    cfg: &TrainConfig,
) -> Result<(sonalign::data::DatasetSpec, Vec<Sample>)> {
    let need_root = || {
        root.clone()
            .ok_or_else(|| Error::Config(format!("dataset {} needs --root", name)))
    };
    match name {
        "synth" => synth_dataset(cfg),
        "esc50" => load_esc50(&need_root()?),
        "us8k" => load_us8k(&need_root()?),
        other => Err(Error::Config(format!("unknown dataset {:?}", other))),
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            dataset,
            root,
            fold,
            config,
            out,
            vocab,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.dataset = dataset;
            if let Some(f) = fold {
                cfg.eval_fold = f;
            }
            if cfg.dataset == "us8k" && cfg.clip_secs == 0.0 {
                cfg.clip_secs = 4.0; // variable-length clips need a fixed T
            }
            let vocab = load_vocab(&vocab)?;
            let (spec, samples) = load_dataset(&cfg.dataset, &root, &cfg)?;
            let (train_set, eval_set) = fold_split(&samples, cfg.eval_fold)?;
            eprintln!(
                "training on {} clips ({} held out in fold {})",
                train_set.len(),
                eval_set.len(),
                cfg.eval_fold
            );
            let ckpt = train(&cfg, &spec, &train_set, &vocab)?;
            for (epoch, loss) in ckpt.loss_log.iter().enumerate() {
                println!("epoch {:>3}  loss {:.6}", epoch, loss);
            }
            save_checkpoint(&ckpt, &out)?;
            eprintln!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            root,
            fold,
            report,
            vocab,
        } => {
            let mut ckpt = load_checkpoint(&ckpt)?;
            if let Some(f) = fold {
                ckpt.config.eval_fold = f;
            }
            let vocab = load_vocab(&vocab)?;
            let (spec, samples) = load_dataset(&ckpt.config.dataset.clone(), &root, &ckpt.config)?;
            let (_, eval_set) = fold_split(&samples, ckpt.config.eval_fold)?;
            let r = evaluate(&ckpt, &spec, &eval_set, &vocab)?;
            r.check_consistency()?;
            std::fs::write(&report, r.to_csv())?;
            println!(
                "fold {}: overall accuracy {:.2}% over {} clips",
                r.fold,
                100.0 * r.overall_accuracy,
                eval_set.len()
            );
            Ok(())
        }
        Command::Classify {
            ckpt,
            wav,
            labels,
            template,
            vocab,
        } => {
            let mut ckpt = load_checkpoint(&ckpt)?;
            if let Some(t) = template {
                PromptTemplate::new(t.as_str())?;
                ckpt.config.template = t;
            }
            let vocab = load_vocab(&vocab)?;
            let labels = read_lines(&labels)?;
            if labels.is_empty() {
                return Err(Error::Config("labels file is empty".into()));
            }
            let spec = sonalign::data::DatasetSpec {
                name: "labels".into(),
                n_classes: labels.len(),
                n_folds: 1,
                labels: labels.clone(),
                train_sample_rate: 8000,
                eval_sample_rate: 8000,
            };
            let classes = sonalign::train::class_embeddings(&ckpt, &spec, &vocab)?;
            let w: Waveform = sonalign::dsp::load_wav(&wav)?;
            let rate = w.sample_rate;
            let sample = Sample {
                source: ClipSource::Memory(w),
                class_id: 0,
                label: String::new(),
                fold: 1,
            };
            let embedding = sonalign::train::embed_clip(&ckpt, &sample, rate, &vocab)?;
            let (best, scores) = sonalign::contrastive::classify(&embedding, &classes)?;
            println!("{}", labels[best]);
            let mut ranked = scores.clone();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            for (id, score) in ranked {
                eprintln!("  {:<24} {:+.4}", labels[id], score);
            }
            Ok(())
        }
        Command::AblatePrompts {
            config,
            templates,
            seeds,
            vocab,
        } => {
            let cfg = load_config(&config)?;
            let templates = read_lines(&templates)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed {:?}", s)))
                })
                .collect::<Result<_>>()?;
            let vocab = load_vocab(&vocab)?;
            let rows = prompt_ablation(&cfg, &templates, &seeds, &vocab)?;
            print!("{}", ablation_table(&rows));
            Ok(())
        }
        Command::Gradcheck => {
            let mut worst: f64 = 0.0;
            for seed in 0..10 {
                for (name, err) in sonalign::gradcheck::primitive_suite(seed)? {
                    worst = worst.max(err);
                    if err >= 1e-4 {
                        eprintln!("FAIL seed {} {}: rel err {:.3e}", seed, name, err);
                        std::process::exit(1);
                    }
                }
            }
            println!("gradcheck passed; worst relative error {:.3e}", worst);
            Ok(())
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
