//! `detox`: command-line driver for the detoxification pipeline.
//!
//! Stage subcommands work inside one directory (`--out`), reading what the
//! previous stage wrote. `pipeline` and `sweep` create one sub-directory per
//! config hash instead.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use detox_core::corpus::{load_corpus, save_corpus, Splits};
use detox_core::pipeline::{
    build_corpus, build_scorers, cached_backbone, emit_curves, evaluate_policy, fresh_adapter,
    grpo_inputs, language, ood_csv, run_grpo, run_pipeline, run_sft, run_sweep, select_sft_data,
    test_sources, train_classifiers, Judges, Language, PipelineConfig, SweepAxis,
};
use detox_core::policy::AdapterParams;
use detox_core::toxicity::ToxicityModel;
use detox_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "detox", version, about = "Synthetic two-stage detoxification: filtered SFT then GRPO")]
struct Cli {
    /// Config file with `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the parallel corpus and its train/val/test splits.
    GenCorpus,
    /// Train the reward and evaluation toxicity classifiers.
    TrainTox,
    /// Sample and similarity-filter the cold-start subset.
    Filter,
    /// Supervised cold start on the filtered subset.
    Sft,
    /// GRPO on toxic training sources, starting from the SFT adapter if present.
    Grpo,
    /// Evaluate an adapter (default: latest in --out) on the test split and the shifted set.
    Eval {
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Run every enabled stage into a fresh run directory.
    Pipeline,
    /// One pipeline per value of a hyperparameter.
    Sweep {
        /// lambda, alpha or data_fraction.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the standard grid for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Split a metrics CSV into per-metric (step, value) files.
    Curves {
        metrics: PathBuf,
        /// Destination directory; defaults to the CSV's directory.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(dir: &Path, lang: &Language) -> Result<Splits<detox_core::corpus::ParallelPair>> {
    let load = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Invalid(format!("{} not found; run gen-corpus first", p.display())));
        }
        load_corpus(&p, &lang.vocab)
    };
    Ok(Splits {
        train: load("train.txt")?,
        val: load("val.txt")?,
        test: load("test.txt")?,
    })
}

fn load_judges(cfg: &PipelineConfig, lang: &Language) -> Result<Judges> {
    let dir = &cfg.out_dir;
    let load = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Invalid(format!("{} not found; run train-tox first", p.display())));
        }
        ToxicityModel::load(&p, lang.vocab.len())
    };
    let (reward_scorer, eval_scorer) = build_scorers(cfg, lang)?;
    Ok(Judges {
        reward_tox: load("tox_reward.txt")?,
        eval_tox: load("tox_eval.txt")?,
        reward_scorer,
        eval_scorer,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.out_dir.clone();
    match &cli.command {
        Command::GenCorpus => {
            mkdir(&dir)?;
            let lang = language(&cfg)?;
            let (pairs, splits) = build_corpus(&cfg, &lang)?;
            save_corpus(&pairs, &lang.vocab, &dir.join("corpus.txt"))?;
            save_corpus(&splits.train, &lang.vocab, &dir.join("train.txt"))?;
            save_corpus(&splits.val, &lang.vocab, &dir.join("val.txt"))?;
            save_corpus(&splits.test, &lang.vocab, &dir.join("test.txt"))?;
            println!(
                "{} pairs ({} drift): train {} / val {} / test {}",
                pairs.len(),
                pairs.iter().filter(|p| p.is_drift).count(),
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
        }
        Command::TrainTox => {
            let lang = language(&cfg)?;
            let splits = load_splits(&dir, &lang)?;
            let (reward, eval) = train_classifiers(&cfg, &lang, &splits.train)?;
            reward.save(&dir.join("tox_reward.txt"))?;
            eval.save(&dir.join("tox_eval.txt"))?;
            println!("wrote tox_reward.txt and tox_eval.txt");
        }
        Command::Filter => {
            let lang = language(&cfg)?;
            let splits = load_splits(&dir, &lang)?;
            let (reward_scorer, _) = build_scorers(&cfg, &lang)?;
            let data = select_sft_data(&cfg, &splits.train, &reward_scorer)?;
            save_corpus(&data, &lang.vocab, &dir.join("sft_data.txt"))?;
            println!(
                "kept {} pairs ({} drift) at alpha={}",
                data.len(),
                data.iter().filter(|p| p.is_drift).count(),
                cfg.sft.alpha
            );
        }
        Command::Sft => {
            let lang = language(&cfg)?;
            let path = dir.join("sft_data.txt");
            if !path.exists() {
                return Err(Error::Invalid(format!("{} not found; run filter first", path.display())));
            }
            let data = load_corpus(&path, &lang.vocab)?;
            let base = cached_backbone(&cfg, &lang)?;
            let (adapter, out) = run_sft(&cfg, &base, &data)?;
            adapter.save(&dir.join("adapter_sft.txt"))?;
            out.write_csv(&dir.join("sft_metrics.csv"))?;
            println!("epoch losses {:?}", out.epoch_losses);
        }
        Command::Grpo => {
            let lang = language(&cfg)?;
            let splits = load_splits(&dir, &lang)?;
            let judges = load_judges(&cfg, &lang)?;
            let base = cached_backbone(&cfg, &lang)?;
            let sft_path = dir.join("adapter_sft.txt");
            let start = if sft_path.exists() {
                AdapterParams::load(&sft_path)?
            } else {
                fresh_adapter(&cfg)?
            };
            let ckpt = (cfg.grpo.checkpoint_every > 0).then(|| dir.join("checkpoints"));
            if let Some(c) = &ckpt {
                mkdir(c)?;
            }
            let inputs = grpo_inputs(&cfg, &splits.train);
            let (adapter, out) = run_grpo(&cfg, &base, &start, &inputs, &judges, ckpt)?;
            adapter.save(&dir.join("adapter_grpo.txt"))?;
            out.write_csv(&dir.join("grpo_metrics.csv"))?;
            println!("epoch mean rewards {:?}", out.epoch_rewards);
        }
        Command::Eval { adapter } => {
            let lang = language(&cfg)?;
            let splits = load_splits(&dir, &lang)?;
            let judges = load_judges(&cfg, &lang)?;
            let base = cached_backbone(&cfg, &lang)?;
            let path = adapter.clone().or_else(|| {
                ["adapter_grpo.txt", "adapter_sft.txt"]
                    .iter()
                    .map(|n| dir.join(n))
                    .find(|p| p.exists())
            });
            let adapter = path.as_deref().map(AdapterParams::load).transpose()?;
            let sources = test_sources(&cfg, &splits.test);
            let e = evaluate_policy(&cfg, &lang, &judges, &base, adapter.as_ref(), &sources)?;
            e.report.write_csv(&dir.join("eval_report.csv"))?;
            e.report.write_per_sample_csv(&dir.join("eval_samples.csv"))?;
            write(&dir.join("ood_report.csv"), &ood_csv(&e.ood))?;
            print!("{}", e.report.to_csv_string());
        }
        Command::Pipeline => {
            let r = run_pipeline(&cfg)?;
            println!("{}", r.run_dir.display());
            print!("{}", r.final_eval.report.to_csv_string());
        }
        Command::Sweep { axis, values } => {
            let axis = SweepAxis::parse(axis)
                .ok_or_else(|| Error::Config(format!("unknown sweep axis '{axis}'")))?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values.clone()
            };
            let rows = run_sweep(&cfg, axis, &values)?;
            for row in &rows {
                match &row.outcome {
                    Ok(r) => {
                        let m = &r.final_eval.report;
                        println!(
                            "{}={}: STA {:.2} SIM {:.2} FL {:.2} J {:.2}",
                            axis.as_str(),
                            row.value,
                            m.sta,
                            m.sim,
                            m.fl,
                            m.j
                        );
                    }
                    Err(e) => println!("{}={}: failed: {e}", axis.as_str(), row.value),
                }
            }
            if rows.iter().any(|r| r.outcome.is_err()) {
                return Err(Error::Invalid("one or more sweep values failed".into()));
            }
        }
        Command::Curves { metrics, dest } => {
            let dest = dest.clone().unwrap_or_else(|| {
                metrics.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            for p in emit_curves(metrics, &dest)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes are configuration errors; help and version are not errors.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
