//! Glue from manifests to trained checkpoints and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;

use crate::audio::{fit_codebook, quantize, Codebook, FrameSequence};
use crate::config::PipelineConfig;
use crate::corpus::{load_manifest, read_frames, resolve_frames, ManifestRecord, Task};
use crate::encoder::{encode_batch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{score_group, EvalGroup, EvalReport, Provenance, RetrievalIndex, TextMetric};
use crate::numerics::Tensor;
use crate::trainer::{
    config_hash, train, Checkpoint, MetricsLog, Pair, StepMetrics, TrainConfig, TrainData,
    TrainState,
};
use crate::vocab::{render_prefix, Modality, TextVocab, TokenSequence, Vocab, VocabMode};
use crate::{par, rng};

const CODEBOOK_STREAM: u64 = 0x636f_6465;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Manifest records with their source path.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            records: load_manifest(path)?,
        })
    }

    /// Load and require every record to have `task`.
    pub fn load_task(path: &Path, task: Task) -> Result<Self> {
        let m = Self::load(path)?;
        if let Some(r) = m.records.iter().find(|r| r.task != task) {
            return Err(Error::Data(format!(
                "{}: record {} is {} but this input takes {} records",
                path.display(),
                r.id,
                r.task.name(),
                task.name()
            )));
        }
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn speech(&self) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.frames_path.is_some()).collect()
    }
}

/// Read the frame file of every speech record, in record order.
pub fn load_speech(m: &Manifest) -> Result<Vec<FrameSequence>> {
    let recs = m.speech();
    par::map(&recs, |r| {
        let path = resolve_frames(&m.path, r)?;
        let f = read_frames(&path).map_err(|e| match e {
            Error::Io { path, source } => Error::Data(format!(
                "missing frames for {}: {}: {source}",
                r.id,
                path.display()
            )),
            other => other,
        })?;
        f.into_sequence(&r.id, &r.language)
    })
    .into_iter()
    .collect()
}

/// Fit the audio codebook on all training frames.
pub fn fit_audio(cfg: &PipelineConfig, speech: &[FrameSequence]) -> Result<Codebook> {
    let dim = speech
        .first()
        .map(|s| s.dim)
        .ok_or_else(|| Error::Data("no speech to fit a codebook on".into()))?;
    let mut frames = Vec::new();
    for s in speech {
        if s.dim != dim {
            return Err(Error::Data(format!(
                "{} has frame dim {} but others have {dim}",
                s.source_id, s.dim
            )));
        }
        frames.extend_from_slice(&s.frames);
    }
    let seed = rng::derive_seed(cfg.seed, &[CODEBOOK_STREAM]);
    let report = fit_codebook(&frames, dim, cfg.data.codebook_size, cfg.data.kmeans_iters, seed)?;
    info!(
        "codebook: k={} dim={dim} iterations={} final distortion {:.5}",
        cfg.data.codebook_size,
        report.iterations,
        report.distortions.last().copied().unwrap_or(0.0)
    );
    Ok(report.codebook)
}

/// The strings the text side will actually see, used to learn merges.
fn vocab_corpus(manifests: &[&Manifest]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for m in manifests {
        for r in &m.records {
            if r.frames_path.is_some() {
                out.push(render_prefix(&r.language, Modality::Speech)?);
            }
            if let Some(t) = &r.transcript {
                out.push(format!("{} {t}", render_prefix(&r.language, Modality::Text)?));
            }
            if let Some(t) = &r.translation {
                out.push(format!(
                    "{} {}",
                    render_prefix(&t.target_lang, Modality::Text)?,
                    t.text
                ));
            }
        }
    }
    Ok(out)
}

pub fn fit_vocab(cfg: &PipelineConfig, manifests: &[&Manifest], audio_size: usize) -> Result<Vocab> {
    let text = match cfg.data.vocab_mode {
        VocabMode::Byte => TextVocab::byte_level(),
        VocabMode::Subword => TextVocab::train_subword(&vocab_corpus(manifests)?, cfg.data.subword_merges),
    };
    info!("text vocabulary: {} ids ({:?})", text.size(), cfg.data.vocab_mode);
    Ok(Vocab::new(text, audio_size, cfg.data.max_len))
}

fn speech_inputs(m: &Manifest, vocab: &Vocab, cb: &Codebook) -> Result<Vec<TokenSequence>> {
    let speech = load_speech(m)?;
    par::map(&speech, |s| {
        let tokens = quantize(s, cb)?;
        vocab.build_speech_input(&s.language, &tokens)
    })
    .into_iter()
    .collect()
}

fn transcript(r: &ManifestRecord) -> Result<&str> {
    r.transcript
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no transcript", r.id)))
}

fn translation(r: &ManifestRecord) -> Result<(&str, &str)> {
    r.translation
        .as_ref()
        .map(|t| (t.target_lang.as_str(), t.text.as_str()))
        .ok_or_else(|| Error::Data(format!("record {} has no translation", r.id)))
}

/// S2T pairs: speech with a speech prefix against the transcript.
pub fn s2t_pairs(m: &Manifest, vocab: &Vocab, cb: &Codebook) -> Result<Vec<Pair>> {
    let speech = speech_inputs(m, vocab, cb)?;
    m.speech()
        .into_iter()
        .zip(speech)
        .map(|(r, a)| {
            Ok(Pair {
                a,
                b: vocab.build_text_input(&r.language, transcript(r)?)?,
                task: Task::S2T,
            })
        })
        .collect()
}

/// MT pairs: source text against target text, both with text prefixes.
pub fn mt_pairs(m: &Manifest, vocab: &Vocab) -> Result<Vec<Pair>> {
    m.records
        .iter()
        .map(|r| {
            let (lang, text) = translation(r)?;
            Ok(Pair {
                a: vocab.build_text_input(&r.language, transcript(r)?)?,
                b: vocab.build_text_input(lang, text)?,
                task: Task::MT,
            })
        })
        .collect()
}

/// Fitted assets and training pools.
pub struct Prepared {
    pub vocab: Vocab,
    pub codebook: Codebook,
    pub encoder: EncoderConfig,
    pub data: TrainData,
}

/// Previously fitted assets; anything missing is fitted from the data.
#[derive(Debug, Clone, Default)]
pub struct Assets {
    pub vocab: Option<Vocab>,
    pub codebook: Option<Codebook>,
}

/// Fit codebook and vocabulary (unless given) and build the pair pools.
pub fn prepare(
    cfg: &PipelineConfig,
    s2t: &Manifest,
    mt: Option<&Manifest>,
    assets: Assets,
) -> Result<Prepared> {
    let codebook = match assets.codebook {
        Some(cb) => cb,
        None => fit_audio(cfg, &load_speech(s2t)?)?,
    };
    let vocab = match assets.vocab {
        Some(v) => v,
        None => {
            let mut all = vec![s2t];
            all.extend(mt);
            fit_vocab(cfg, &all, codebook.k())?
        }
    };
    if vocab.a() != codebook.k() {
        return Err(Error::Config(format!(
            "vocabulary expects {} audio tokens but the codebook has {}",
            vocab.a(),
            codebook.k()
        )));
    }
    let data = TrainData {
        s2t: s2t_pairs(s2t, &vocab, &codebook)?,
        mt: match mt {
            Some(m) => mt_pairs(m, &vocab)?,
            None => Vec::new(),
        },
    };
    let encoder = cfg.model.to_encoder(vocab.t(), vocab.a(), vocab.max_len);
    Ok(Prepared {
        vocab,
        codebook,
        encoder,
        data,
    })
}

pub fn make_checkpoint(
    prepared: &Prepared,
    train: &TrainConfig,
    state: &TrainState,
) -> Checkpoint {
    Checkpoint {
        encoder: prepared.encoder.clone(),
        train: train.clone(),
        step: state.step,
        params: state.params.clone(),
        optimizer: state.optimizer.clone(),
        vocab: prepared.vocab.to_file(),
        codebook: prepared.codebook.clone(),
    }
}


#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Where and how to run training.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub mt: Option<&'a Manifest>,
    /// Use this codebook instead of fitting one.
    pub codebook: Option<Codebook>,
    /// Continue from `checkpoint.ckpt` in the output directory if present.
    pub resume: bool,
    /// S2T manifest scored every `eval_every` steps.
    pub eval: Option<&'a Manifest>,
}

/// Train into `out_dir`, writing `metrics.jsonl`, `checkpoint.ckpt` and
/// periodic `checkpoint-<step>.ckpt` files. When resuming, the existing
/// checkpoint must match the configuration and training continues from its
/// step with its vocabulary and codebook.
pub fn run_training(
    cfg: &PipelineConfig,
    s2t: &Manifest,
    out_dir: &Path,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    let RunOptions {
        mt,
        codebook,
        resume,
        eval,
    } = opts;
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(METRICS_FILE);
    let existing = if resume && ck_path.exists() {
        Some(Checkpoint::load(&ck_path)?)
    } else {
        None
    };
    let assets = match &existing {
        Some(ck) => Assets {
            vocab: Some(Vocab::from_file(&ck.vocab)?),
            codebook: Some(ck.codebook.clone()),
        },
        None => Assets {
            vocab: None,
            codebook,
        },
    };
    let prepared = prepare(cfg, s2t, mt, assets)?;
    let mut state = match existing {
        Some(ck) => {
            ck.ensure_config(&prepared.encoder, &train_cfg)?;
            info!("resuming from step {}", ck.step);
            TrainState::from_checkpoint(ck)
        }
        None => TrainState::init(&prepared.encoder, train_cfg.seed)?,
    };
    info!(
        "encoder: {} parameters; {} S2T and {} MT pairs",
        prepared.encoder.param_count(),
        prepared.data.s2t.len(),
        prepared.data.mt.len()
    );
    let mut log = if state.step > 0 {
        MetricsLog::resume(&log_path, state.step)?
    } else {
        MetricsLog::create(&log_path)?
    };
    make_checkpoint(&prepared, &train_cfg, &state).save(&ck_path)?;
    let mut last = None;
    let total = train_cfg.total_steps;
    train(&mut state, &prepared.encoder, &train_cfg, &prepared.data, |m, st| {
        let done = st.step;
        if let (Some(manifest), true) = (eval, train_cfg.eval_every > 0) {
            if done % train_cfg.eval_every == 0 || done == total {
                let rep = evaluate_with(
                    &st.params,
                    &prepared.encoder,
                    &prepared.vocab,
                    &prepared.codebook,
                    manifest,
                    Task::S2T,
                    cfg.eval.micro_batch,
                    Provenance::default(),
                )?;
                let mut e = BTreeMap::new();
                e.insert("s2t_r_at_1".to_string(), rep.aggregate.r_at_1);
                if let Some(w) = rep.aggregate.wer {
                    e.insert("s2t_wer".to_string(), w);
                }
                m.eval = Some(e);
                info!("step {done}: {}", rep.summary());
            }
        }
        log.append(m)?;
        if done % 50 == 0 || done == total {
            info!("step {done}/{total} lr {:.2e} loss {:.4}", m.lr, m.loss);
        }
        let periodic = train_cfg.checkpoint_every > 0 && done % train_cfg.checkpoint_every == 0;
        if periodic || done == total {
            let ck = make_checkpoint(&prepared, &train_cfg, st);
            ck.save(&ck_path)?;
            if periodic {
                ck.save(&out_dir.join(format!("checkpoint-{done:06}.ckpt")))?;
            }
        }
        last = Some(m.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        state,
        last,
        checkpoint: ck_path,
    })
}

/// Candidate pool for one query language: unique texts, with each query's
/// gold text mapped to its pool index.
struct Pool {
    inputs: Vec<TokenSequence>,
    texts: Vec<String>,
    languages: Vec<String>,
    gold: Vec<usize>,
    queries: Vec<TokenSequence>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_with(
    params: &EncoderParams<f32>,
    encoder: &EncoderConfig,
    vocab: &Vocab,
    codebook: &Codebook,
    manifest: &Manifest,
    task: Task,
    micro_batch: usize,
    provenance: Provenance,
) -> Result<EvalReport> {
    let speech = speech_inputs(manifest, vocab, codebook)?;
    let mut pools: BTreeMap<String, Pool> = BTreeMap::new();
    let mut seen: HashMap<(String, String, String), usize> = HashMap::new();
    for (r, q) in manifest.speech().into_iter().zip(speech) {
        let (lang, text) = match task {
            Task::S2T => (r.language.as_str(), transcript(r)?),
            Task::S2TT => translation(r)?,
            Task::MT => return Err(Error::Data("MT records cannot be evaluated as speech".into())),
        };
        let pool = pools.entry(r.language.clone()).or_insert_with(|| Pool {
            inputs: Vec::new(),
            texts: Vec::new(),
            languages: Vec::new(),
            gold: Vec::new(),
            queries: Vec::new(),
        });
        let key = (r.language.clone(), lang.to_string(), text.to_string());
        let idx = match seen.get(&key) {
            Some(&i) => i,
            None => {
                pool.inputs.push(vocab.build_text_input(lang, text)?);
                pool.texts.push(text.to_string());
                pool.languages.push(lang.to_string());
                seen.insert(key, pool.texts.len() - 1);
                pool.texts.len() - 1
            }
        };
        pool.gold.push(idx);
        pool.queries.push(q);
    }
    if pools.is_empty() {
        return Err(Error::Data(format!(
            "{}: no speech records to evaluate",
            manifest.path.display()
        )));
    }
    let metric = if task == Task::S2T {
        TextMetric::Wer
    } else {
        TextMetric::Bleu
    };
    let mut rows = Vec::new();
    for (language, pool) in pools {
        let ids = |v: &[TokenSequence]| v.iter().map(|s| s.ids.clone()).collect::<Vec<_>>();
        let (q, c) = (ids(&pool.queries), ids(&pool.inputs));
        let qr: Vec<&[usize]> = q.iter().map(Vec::as_slice).collect();
        let cr: Vec<&[usize]> = c.iter().map(Vec::as_slice).collect();
        let group = EvalGroup {
            language,
            queries: encode_batch(params, encoder, &qr, micro_batch)?,
            index: RetrievalIndex::new(
                encode_batch(params, encoder, &cr, micro_batch)?,
                pool.texts,
                pool.languages,
            )?,
            gold: pool.gold,
        };
        rows.push(score_group(&group, metric)?);
    }
    Ok(EvalReport::new(task, rows, provenance))
}

/// Evaluate a checkpoint on an S2T or S2TT manifest.
pub fn evaluate(
    ck: &Checkpoint,
    ck_path: &Path,
    manifest: &Manifest,
    task: Task,
    micro_batch: usize,
) -> Result<EvalReport> {
    let vocab = Vocab::from_file(&ck.vocab)?;
    let provenance = Provenance {
        checkpoint: ck_path.display().to_string(),
        manifest: manifest.path.display().to_string(),
        step: ck.step,
        config_hash: config_hash(&ck.encoder, &ck.train)?,
    };
    evaluate_with(
        &ck.params,
        &ck.encoder,
        &vocab,
        &ck.codebook,
        manifest,
        task,
        micro_batch,
        provenance,
    )
}

/// Which input of each record to embed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Speech,
    Transcript,
    Translation,
}

/// Embed one side of every record that has it; returns (record id,
/// sequence, embedding) in record order.
pub fn embed(
    ck: &Checkpoint,
    manifest: &Manifest,
    side: Side,
    micro_batch: usize,
) -> Result<Vec<(String, TokenSequence, Vec<f32>)>> {
    let vocab = Vocab::from_file(&ck.vocab)?;
    let (ids, seqs): (Vec<String>, Vec<TokenSequence>) = match side {
        Side::Speech => {
            let seqs = speech_inputs(manifest, &vocab, &ck.codebook)?;
            (manifest.speech().iter().map(|r| r.id.clone()).collect(), seqs)
        }
        Side::Transcript => manifest
            .records
            .iter()
            .filter_map(|r| r.transcript.as_ref().map(|t| (r, t)))
            .map(|(r, t)| Ok((r.id.clone(), vocab.build_text_input(&r.language, t)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
        Side::Translation => manifest
            .records
            .iter()
            .filter_map(|r| r.translation.as_ref().map(|t| (r, t)))
            .map(|(r, t)| Ok((r.id.clone(), vocab.build_text_input(&t.target_lang, &t.text)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    let e: Tensor<f32> = encode_batch(&ck.params, &ck.encoder, &refs, micro_batch)?;
    Ok(ids
        .into_iter()
        .zip(seqs)
        .enumerate()
        .map(|(i, (id, s))| (id, s, e.row(i).to_vec()))
        .collect())
}
