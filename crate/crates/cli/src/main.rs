use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualspeech::audio::{fit_codebook, quantize_all, Codebook};
use dualspeech::config::PipelineConfig;
use dualspeech::corpus::{generate, SyntheticSpec, Task};
use dualspeech::eval::EvalReport;
use dualspeech::pipeline::{self, load_speech, Manifest, RunOptions, Side};
use dualspeech::trainer::Checkpoint;
use dualspeech::{Error, Result};

#[derive(Parser)]
#[command(name = "dualspeech", version, about = "Speech-text dual-encoder retrieval")]
struct Cli {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Speech,
    Transcript,
    Translation,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multilingual corpus.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as TOML.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fit a k-means audio codebook on the frames of a manifest.
    FitCodebook {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook size; defaults to the config's codebook_size.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Quantize speech frames to audio tokens (JSON lines).
    Quantize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual encoder.
    Train {
        #[arg(long)]
        s2t_train: PathBuf,
        #[arg(long)]
        mt_train: Option<PathBuf>,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Use a fitted codebook instead of fitting one.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Override total_steps; 0 writes the initial checkpoint only.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        mt_fraction: Option<f64>,
        /// S2T manifest for periodic evaluation.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Speech-to-transcript retrieval: R@1 and retrieval WER.
    EvalS2t {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the JSON, CSV and TSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speech-to-translation retrieval: R@1 and corpus BLEU.
    EvalS2tt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump embeddings of one side of a manifest (JSON lines).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tables from saved evaluation reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write `<name>.groups.csv` and `<name>.languages.tsv` here.
        #[arg(long)]
        out: Option<PathBuf>,
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
    Ok(cfg)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let tmp = path.with_extension("tmp");
    let io = |e| Error::Io {
        path: tmp.clone(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(&tmp).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.into_inner()
        .map_err(|e| io(e.into_error()))?
        .sync_all()
        .map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn finish_report(rep: &EvalReport, out: Option<&Path>, stem: &str) -> Result<()> {
    println!("{}", rep.summary());
    for r in &rep.per_language {
        let metric = match (r.wer, r.bleu) {
            (Some(w), _) => format!("WER {:.2}%", 100.0 * w),
            (_, Some(b)) => format!("BLEU {b:.2}"),
            _ => String::new(),
        };
        println!("  {:<12} n={:<5} R@1 {:.3}  {metric}", r.language, r.count, r.r_at_1);
    }
    if let Some(dir) = out {
        rep.save_all(dir, stem)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenSynthetic { out, spec } => {
            let mut s = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    toml::from_str::<SyntheticSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let corpus = generate(&s)?;
            corpus.write(&out)?;
            println!(
                "wrote {} S2T train, {} S2T test, {} MT, {} S2TT test records to {}",
                corpus.s2t_train.len(),
                corpus.s2t_test.len(),
                corpus.mt_train.len(),
                corpus.s2tt_test.len(),
                out.display()
            );
        }
        Command::FitCodebook { manifest, out, k, iters } => {
            let speech = load_speech(&Manifest::load(&manifest)?)?;
            let dim = speech
                .first()
                .map(|s| s.dim)
                .ok_or_else(|| Error::Data("manifest has no speech records".into()))?;
            let frames: Vec<f32> = speech.iter().flat_map(|s| s.frames.iter().copied()).collect();
            let k = k.unwrap_or(cfg.data.codebook_size);
            let report = fit_codebook(&frames, dim, k, iters.unwrap_or(cfg.data.kmeans_iters), cfg.seed)?;
            report.codebook.save(&out)?;
            println!(
                "codebook k={k} dim={dim}: {} iterations, distortion {:.6}, {} repairs",
                report.iterations,
                report.distortions.last().copied().unwrap_or(0.0),
                report.repairs
            );
        }
        Command::Quantize { manifest, codebook, out } => {
            let m = Manifest::load(&manifest)?;
            let cb = Codebook::load(&codebook)?;
            let speech = load_speech(&m)?;
            let tokens = quantize_all(&speech, &cb)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                language: &'a str,
                tokens: &'a [usize],
            }
            write_jsonl(
                &out,
                speech.iter().zip(&tokens).map(|(s, t)| Row {
                    id: &s.source_id,
                    language: &s.language,
                    tokens: t,
                }),
            )?;
            println!("quantized {} sequences", speech.len());
        }
        Command::Train {
            s2t_train,
            mt_train,
            out,
            codebook,
            steps,
            mt_fraction,
            eval,
            resume,
        } => {
            let mut cfg = cfg;
            if let Some(n) = steps {
                cfg.train.total_steps = n;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(n);
            }
            if let Some(f) = mt_fraction {
                cfg.train.mt_fraction = f;
            }
            let s2t = Manifest::load_task(&s2t_train, Task::S2T)?;
            let mt = mt_train.map(|p| Manifest::load_task(&p, Task::MT)).transpose()?;
            let eval = eval.map(|p| Manifest::load_task(&p, Task::S2T)).transpose()?;
            let codebook = codebook.map(|p| Codebook::load(&p)).transpose()?;
            let outcome = pipeline::run_training(
                &cfg,
                &s2t,
                &out,
                RunOptions {
                    mt: mt.as_ref(),
                    codebook,
                    resume,
                    eval: eval.as_ref(),
                },
            )?;
            match outcome.last {
                Some(m) => println!(
                    "trained to step {}: loss {:.4}; checkpoint {}",
                    outcome.state.step,
                    m.loss,
                    outcome.checkpoint.display()
                ),
                None => println!(
                    "checkpoint at step {} written to {}",
                    outcome.state.step,
                    outcome.checkpoint.display()
                ),
            }
        }
        Command::EvalS2t { checkpoint, manifest, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load_task(&manifest, Task::S2T)?;
            let rep = pipeline::evaluate(&ck, &checkpoint, &m, Task::S2T, cfg.eval.micro_batch)?;
            finish_report(&rep, out.as_deref(), "eval-s2t")?;
        }
        Command::EvalS2tt { checkpoint, manifest, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load_task(&manifest, Task::S2TT)?;
            let rep = pipeline::evaluate(&ck, &checkpoint, &m, Task::S2TT, cfg.eval.micro_batch)?;
            finish_report(&rep, out.as_deref(), "eval-s2tt")?;
        }
        Command::Embed { checkpoint, manifest, side, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let side = match side {
                SideArg::Speech => Side::Speech,
                SideArg::Transcript => Side::Transcript,
                SideArg::Translation => Side::Translation,
            };
            let rows = pipeline::embed(&ck, &m, side, cfg.eval.micro_batch)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                language: &'a str,
                modality: &'a str,
                embedding: &'a [f32],
            }
            write_jsonl(
                &out,
                rows.iter().map(|(id, s, e)| Row {
                    id,
                    language: &s.language,
                    modality: s.modality.name(),
                    embedding: e,
                }),
            )?;
            println!("wrote {} embeddings of dimension {}", rows.len(), ck.encoder.proj_dim);
        }
        Command::Report { reports, out } => {
            for p in reports {
                let rep = EvalReport::load_json(&p)?;
                println!("== {}", p.display());
                print!("{}", rep.group_csv());
                if let Some(dir) = &out {
                    let stem = p
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("report")
                        .to_string();
                    rep.save_all(dir, &stem)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(1)
        }
    }
}
