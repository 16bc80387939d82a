//! `emograce`: corpus aggregation, training, evaluation and tuning for
//! aspect-based emotion analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emograce::corpus::{build_corpus, corpus_stats, load_annotations, load_corpus, split_corpus, AnnotatedDocument, Split};
use emograce::eval::{cross_validate, evaluate, SentenceRecord};
use emograce::hpo::{greedy_sweep, ExternalSets, SweepPlan, TrainingEvaluator};
use emograce::io::{read_jsonl, to_jsonl, write_atomic, write_json, write_jsonl};
use emograce::model::Tagger;
use emograce::trainer::{run_training_observed, RunConfig};
use emograce::{Error, Result};

#[derive(Parser)]
#[command(name = "emograce", version, about = "Aspect-based emotion analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge three-annotator exports into a majority-vote corpus.
    Aggregate {
        /// Raw annotation export, one record per annotator and document.
        #[arg(long = "in")]
        input: PathBuf,
        /// Corpus output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Agreement report output (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Documents needing emotion review (JSONL).
        #[arg(long)]
        review: PathBuf,
    },
    /// Shuffle a corpus and write train.jsonl, val.jsonl and test.jsonl.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        /// Train, validation and test proportions; must sum to 1.
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.1,0.2")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory; defaults to the directory of the input.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print corpus statistics as one JSON record.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train a model on <data>/train.jsonl, selecting on <data>/val.jsonl.
    Train {
        /// TOML run configuration, or a preset name (baseline, config_41, tiny).
        #[arg(long)]
        config: String,
        /// Directory holding train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output.
        #[arg(long)]
        out: PathBuf,
        /// Training log output (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint against an annotated corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Corpus file (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Full report output (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// k-fold cross-validation; prints one JSON record per fold and a summary.
    Cv {
        /// TOML run configuration, or a preset name.
        #[arg(long)]
        config: String,
        /// Corpus file (JSONL).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report output (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Greedy hyperparameter sweep; prints one JSON record per evaluated configuration.
    Hpo {
        /// Sweep plan (TOML with [[category]] tables).
        #[arg(long)]
        plan: PathBuf,
        /// Base run configuration, or a preset name.
        #[arg(long)]
        config: String,
        /// Directory holding train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Restaurant-domain corpus for external aspect extraction.
        #[arg(long)]
        restaurant: Option<PathBuf>,
        /// Laptop-domain corpus for external aspect extraction.
        #[arg(long)]
        laptop: Option<PathBuf>,
        /// Sentence-level emotion set, records of {text, emotion}.
        #[arg(long)]
        affect: Option<PathBuf>,
        /// Count missing external scores as zero in the seven-score average.
        #[arg(long)]
        zero_fill_external: bool,
        /// Sweep log output (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Winning configuration output (TOML).
        #[arg(long)]
        best: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tag a text; prints one `(start,end) Emotion` line per span.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
    },
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            arg: "path",
            reason: format!("{} is not a readable file", path.display()),
        })
    }
}

fn load_config(spec: &str, seed: Option<u64>) -> Result<RunConfig> {
    let path = Path::new(spec);
    let mut config = if path.is_file() {
        RunConfig::load(path)?
    } else if let Some(c) = RunConfig::preset(spec) {
        c
    } else {
        return Err(Error::Config(format!("`{spec}` is neither a config file nor a preset")));
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn load_split(dir: &Path, need_test: bool) -> Result<Split<AnnotatedDocument>> {
    let names: &[&str] = if need_test { &["train", "val", "test"] } else { &["train", "val"] };
    for n in names {
        require_file(&dir.join(format!("{n}.jsonl")))?;
    }
    let test = dir.join("test.jsonl");
    Ok(Split {
        train: load_corpus(&dir.join("train.jsonl"))?,
        val: load_corpus(&dir.join("val.jsonl"))?,
        test: if test.is_file() { load_corpus(&test)? } else { Vec::new() },
    })
}

fn json_line<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Aggregate {
            input,
            out,
            report,
            review,
        } => {
            require_file(&input)?;
            let build = build_corpus(&load_annotations(&input)?)?;
            write_jsonl(&out, &build.documents)?;
            write_json(&report, &build.report)?;
            write_jsonl(&review, &build.review)?;
            json_line(&build.report)
        }
        Command::Split {
            input,
            ratios,
            seed,
            out_dir,
        } => {
            let ratios: [f64; 3] = ratios.try_into().map_err(|r: Vec<f64>| Error::InvalidArgument {
                arg: "ratios",
                reason: format!("expected three values, got {}", r.len()),
            })?;
            // Surface ratio errors before touching the input.
            split_corpus::<()>(&[], ratios, seed)?;
            require_file(&input)?;
            let split = split_corpus(&load_corpus(&input)?, ratios, seed)?;
            let dir = out_dir.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    context: format!("creating {}", dir.display()),
                    source: e,
                })?;
            }
            write_jsonl(&dir.join("train.jsonl"), &split.train)?;
            write_jsonl(&dir.join("val.jsonl"), &split.val)?;
            write_jsonl(&dir.join("test.jsonl"), &split.test)?;
            json_line(&serde_json::json!({
                "train": split.train.len(),
                "val": split.val.len(),
                "test": split.test.len(),
                "seed": seed,
            }))
        }
        Command::Stats { input } => {
            require_file(&input)?;
            json_line(&corpus_stats(&load_corpus(&input)?))
        }
        Command::Train {
            config,
            data,
            out,
            log,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let split = load_split(&data, false)?;
            let outcome = run_training_observed(&split.train, &split.val, &config, &mut |e| {
                eprintln!("{}", serde_json::to_string(e).unwrap_or_default());
            })?;
            outcome.best.save(&out, Some(outcome.checkpoint_meta(&config)))?;
            if let Some(path) = log {
                write_atomic(&path, outcome.log.to_jsonl(&config)?.as_bytes())?;
            }
            match &outcome.log.best {
                Some(best) => json_line(best),
                None => json_line(&serde_json::json!({ "kind": "final" })),
            }
        }
        Command::Eval { model, data, report } => {
            require_file(&model)?;
            require_file(&data)?;
            let tagger = Tagger::load(&model)?;
            let result = evaluate(&tagger, &load_corpus(&data)?)?;
            if let Some(path) = report {
                write_json(&path, &result)?;
            }
            print!("{}", result.table());
            Ok(())
        }
        Command::Cv {
            config,
            data,
            k,
            seed,
            report,
        } => {
            let config = load_config(&config, seed)?;
            require_file(&data)?;
            let cv = cross_validate(&load_corpus(&data)?, &config, k)?;
            if let Some(path) = report {
                write_json(&path, &cv)?;
            }
            print!("{}", to_jsonl(&cv.folds)?);
            json_line(&serde_json::json!({
                "k": cv.k,
                "mean_ate_f1": cv.mean_ate_f1,
                "mean_joint_f1": cv.mean_joint_f1,
            }))
        }
        Command::Hpo {
            plan,
            config,
            data,
            restaurant,
            laptop,
            affect,
            zero_fill_external,
            log,
            best,
            seed,
        } => {
            require_file(&plan)?;
            let base = load_config(&config, seed)?;
            let plan = SweepPlan::load(&plan)?;
            plan.validate(&base)?;
            let split = load_split(&data, true)?;
            for p in [&restaurant, &laptop, &affect].into_iter().flatten() {
                require_file(p)?;
            }
            let external = ExternalSets {
                restaurant: restaurant.as_deref().map(load_corpus).transpose()?,
                laptop: laptop.as_deref().map(load_corpus).transpose()?,
                affect: affect
                    .as_deref()
                    .map(|p| read_jsonl::<SentenceRecord>(p).map(|v| v.into_iter().map(|(_, r)| r).collect()))
                    .transpose()?,
                zero_fill: zero_fill_external,
            };
            let mut evaluator = TrainingEvaluator {
                data: &split,
                external: &external,
            };
            let outcome = greedy_sweep(&plan, &base, &mut evaluator)?;
            let lines = to_jsonl(&outcome.log)?;
            if let Some(path) = log {
                write_atomic(&path, lines.as_bytes())?;
            }
            if let Some(path) = best {
                write_atomic(&path, outcome.best.to_toml_string().as_bytes())?;
            }
            print!("{lines}");
            Ok(())
        }
        Command::Predict { model, text } => {
            require_file(&model)?;
            for s in Tagger::load(&model)?.predict(&text)? {
                println!("({},{}) {}", s.start, s.end, s.emotion.as_str());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
