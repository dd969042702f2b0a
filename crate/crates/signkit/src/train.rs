//! Training orchestration: the joint pre-training loop, the four
//! fine-tuning pipelines, and deterministic evaluation with metric reports
//! and prediction dumps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tapegrad::{AdamW, AdamWConfig, Dropout, ParamStore, Tape, Var};

use crate::checkpoint::{self, load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::cslr::CslrModel;
use crate::encoder::{PoseDecoder, SignEncoder};
use crate::error::{Error, Result};
use crate::islr::IslrModel;
use crate::masking::{apply_corruption, plan_mask};
use crate::metrics::{self, AccuracyMode};
use crate::objectives::{
    batch_similarity_matrix, pr_loss_mode, stc_loss, total_loss, Projectors, Temperature,
};
use crate::pose_data::{load_corpus, read_manifest, KeypointLayout, SampleMode, SignTextSample};
use crate::slrt::SlrtModel;
use crate::slt::SltModel;
use crate::task::{Task, TaskConfig};
use crate::text::{tokenize, TextConfig, TextEncoder, TextFeatureSource, Vocab, EOS};

/// Corpus loaded into memory with its manifest digest.
pub struct LoadedCorpus {
    pub samples: Vec<SignTextSample>,
    pub fingerprint: String,
}

pub fn load_training_corpus(root: &Path) -> Result<LoadedCorpus> {
    let manifest = read_manifest(root)?;
    let layout = KeypointLayout::default_79();
    let samples = load_corpus(&manifest, &layout)?;
    let fingerprint = checkpoint::corpus_fingerprint(root)?;
    Ok(LoadedCorpus { samples, fingerprint })
}

/// Deterministic (train, eval) index split. "train" evaluates on the
/// training set itself; "holdout" reserves the corpus tail.
pub fn split_indices(n: usize, split: &str, holdout_frac: f64) -> (Vec<usize>, Vec<usize>) {
    match split {
        // A corpus too small to split falls back to in-sample evaluation.
        "holdout" if n >= 2 => {
            let n_eval = ((n as f64 * holdout_frac).ceil() as usize).clamp(1, n - 1);
            let cut = n - n_eval;
            ((0..cut).collect(), (cut..n).collect())
        }
        _ => ((0..n).collect(), (0..n).collect()),
    }
}

/// Vocabulary, frozen text encoder, and cached per-sample text features.
pub struct TextBank {
    pub vocab: Vocab,
    pub encoder: TextEncoder,
    pub feats: Vec<Option<Array2<f64>>>,
}

pub fn build_text_bank(samples: &[SignTextSample], cfg: TextConfig) -> Result<TextBank> {
    let vocab = Vocab::build(samples.iter().filter_map(|s| s.text.as_deref()));
    let encoder = TextEncoder::new(vocab.len(), cfg)?;
    let mut feats = Vec::with_capacity(samples.len());
    for s in samples {
        feats.push(match &s.text {
            Some(text) => {
                let ids = vocab.encode(text, s.lang);
                Some(encoder.encode(&ids).features)
            }
            None => None,
        });
    }
    Ok(TextBank { vocab, encoder, feats })
}

/// Highest gloss id plus one, over every labelled sample.
pub fn gloss_class_count(samples: &[SignTextSample]) -> Result<usize> {
    let max = samples
        .iter()
        .filter_map(|s| s.gloss_labels.as_ref())
        .flat_map(|g| g.iter().copied())
        .max()
        .ok_or_else(|| Error::Config("corpus has no gloss labels".into()))?;
    Ok(max + 1)
}

fn single_gloss_label(s: &SignTextSample) -> Result<usize> {
    match s.gloss_labels.as_deref() {
        Some([g]) => Ok(*g),
        _ => Err(Error::Config(format!(
            "sample '{}' is not single-gloss labelled",
            s.id
        ))),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLosses {
    pub pr: f64,
    pub stc: f64,
}

pub struct PretrainOutcome {
    pub epoch_losses: Vec<EpochLosses>,
    pub stem: PathBuf,
    pub config_hash: String,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64) << 17)
}

fn mean_var(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Joint pre-training: hierarchical masking, reconstruction, and (when
/// lambda > 0) contrastive alignment over each batch. Writes a checkpoint
/// and a loss-curve report under `out_dir`.
pub fn pretrain(
    cfg: &RunConfig,
    corpus_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let corpus = load_training_corpus(corpus_root)?;
    let samples = &corpus.samples;
    if samples.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let layout = KeypointLayout::default_79();
    let model_cfg = cfg.model_config()?;
    let mask_cfg = cfg.mask_config()?;
    let lambda = cfg.f64_of("loss.lambda");
    let pr_weight = cfg.f64_of("loss.pr_weight");
    let pr_normalized = cfg.bool_of("loss.pr_normalized");
    let sim_kind = cfg.similarity_kind()?;
    let seed = cfg.u64_of("seed");
    let epochs = cfg.usize_of("epochs");
    let batch_size = cfg.usize_of("batch_size").max(1);
    let grad_clip = cfg.f64_of("grad_clip");

    let bank = build_text_bank(samples, cfg.text_config())?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = SignEncoder::new(&mut store, model_cfg.clone(), &layout, &mut init_rng)?;
    let decoder = PoseDecoder::new(&mut store, &model_cfg, layout.total_joints, &mut init_rng);
    let projectors = Projectors::new(&mut store, &model_cfg, bank.encoder.feature_dim(), &mut init_rng);
    let temperature = Temperature::with_init(&mut store, cfg.f64_of("loss.tau_init"));

    // Heads with no gradient path this run stay untouched.
    if lambda == 0.0 {
        store.set_frozen_prefix("proj", true);
        store.set_frozen_prefix("stc", true);
    }
    if mask_cfg.ratio == 0.0 || pr_weight == 0.0 {
        store.set_frozen_prefix("decoder", true);
    }

    let mut start_epoch = 0;
    if let Some(stem) = resume {
        let ckpt = load_checkpoint(stem)?;
        if ckpt.meta.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "resume refused: checkpoint config hash {} differs from current {}",
                ckpt.meta.config_hash,
                cfg.hash()
            )));
        }
        ckpt.apply_all(&mut store)?;
        start_epoch = ckpt.meta.epoch + 1;
    }

    let n = samples.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let schedule = cfg.schedule(epochs * steps_per_epoch)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.f64_of("weight_decay"), ..AdamWConfig::default() },
        &store,
    );
    let mut global_step = start_epoch * steps_per_epoch;

    let mut epoch_losses = Vec::new();
    for epoch in start_epoch..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(seed, epoch, 1));
        let mut mask_rng = epoch_rng(seed, epoch, 2);
        let mut dropout = Dropout { p: model_cfg.dropout, rng: epoch_rng(seed, epoch, 3) };

        let mut pr_sum = 0.0;
        let mut stc_sum = 0.0;
        let mut stc_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            store.zero_grads();
            let mut pr_terms = Vec::with_capacity(chunk.len());
            let mut sign_embs = Vec::new();
            let mut text_embs = Vec::new();
            for &idx in chunk {
                let pose = &samples[idx].pose;
                let (t, k) = (pose.num_frames(), pose.num_joints());
                let plan = plan_mask(t, k, &mask_cfg, &mut mask_rng)?;
                let corrupted = apply_corruption(pose, &plan, mask_cfg.jitter_std, &mut mask_rng)?;
                let mut dref = Some(&mut dropout);
                let enc = encoder.forward(&mut tape, &store, &corrupted, &mut dref)?;
                if pr_weight > 0.0 {
                    let recon = decoder.forward(&mut tape, &store, enc.fused);
                    pr_terms.push(pr_loss_mode(
                        &mut tape,
                        recon,
                        &pose.coords_flat(),
                        &plan.mask,
                        &pose.confidence,
                        pr_normalized,
                    )?);
                }
                if lambda > 0.0 {
                    if let Some(feats) = &bank.feats[idx] {
                        sign_embs.push(projectors.project_sign(&mut tape, &store, enc.fused));
                        let f = tape.constant(feats.clone());
                        text_embs.push(projectors.project_text(&mut tape, &store, f));
                    }
                }
            }
            let pr_mean = if pr_terms.is_empty() {
                tape.constant(Array2::zeros((1, 1)))
            } else {
                mean_var(&mut tape, &pr_terms)
            };
            let stc = if lambda > 0.0 && sign_embs.len() >= 2 {
                let sim = batch_similarity_matrix(&mut tape, &sign_embs, &text_embs, sim_kind)?;
                Some(stc_loss(&mut tape, sim, &store, &temperature))
            } else {
                None
            };
            let pr_term =
                if pr_weight == 1.0 { pr_mean } else { tape.scale(pr_mean, pr_weight) };
            let total = total_loss(&mut tape, pr_term, stc, lambda);
            let mut grads = tape.backward(total);
            store.accumulate(&tape, &mut grads);
            if grad_clip > 0.0 {
                store.clip_grad_norm(grad_clip);
            }
            opt.step(&mut store, schedule.lr_at(global_step));
            temperature.clamp(&mut store);
            global_step += 1;

            pr_sum += tape.value(pr_mean)[[0, 0]] * chunk.len() as f64;
            if let Some(s) = stc {
                stc_sum += tape.value(s)[[0, 0]];
                stc_batches += 1;
            }
        }
        let losses = EpochLosses {
            pr: pr_sum / n as f64,
            stc: if stc_batches > 0 { stc_sum / stc_batches as f64 } else { 0.0 },
        };
        log::info!(
            "pretrain epoch {epoch}: reconstruction {:.6}, contrastive {:.6}",
            losses.pr,
            losses.stc
        );
        epoch_losses.push(losses);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let stem = out_dir.join("pretrain");
    save_checkpoint(
        &stem,
        &store,
        "pretrain",
        cfg.to_json(),
        cfg.hash(),
        epochs.saturating_sub(1),
        Some(corpus.fingerprint.clone()),
    )?;
    let report = serde_json::json!({
        "config_hash": cfg.hash(),
        "corpus_fingerprint": corpus.fingerprint,
        "epoch_losses": epoch_losses,
    });
    write_json(&out_dir.join("pretrain_report.json"), &report)?;
    Ok(PretrainOutcome { epoch_losses, stem, config_hash: cfg.hash() })
}

/// One prediction line in the dump: reference and hypothesis rendered as
/// space-joined token strings.
#[derive(Debug, Clone, Serialize)]
pub struct PredRecord {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
    pub n_eval: usize,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_predictions(path: &Path, preds: &[PredRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for p in preds {
        let line = serde_json::to_string(p)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn load_pretrained(path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.kind != "pretrain" {
        return Err(Error::Checkpoint(format!(
            "expected a pre-training checkpoint, found kind '{}'",
            ckpt.meta.kind
        )));
    }
    Ok(ckpt)
}

/// Builds, trains, evaluates, and saves one task pipeline.
pub fn finetune(
    cfg: &RunConfig,
    task: Task,
    corpus_root: &Path,
    pretrained: Option<&Path>,
    out_dir: &Path,
) -> Result<TaskReport> {
    cfg.validate()?;
    let corpus = load_training_corpus(corpus_root)?;
    let samples = &corpus.samples;
    let seed = cfg.u64_of("seed");
    let (train_idx, eval_idx) =
        split_indices(samples.len(), cfg.str_of("eval.split"), cfg.f64_of("eval.holdout_frac"));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let (metrics_map, preds, store) = match task {
        Task::Islr => {
            let (mut store, model, task_cfg) = build_islr(cfg, samples)?;
            if let Some(p) = pretrained {
                load_pretrained(p)?.apply(&mut store, &["encoder"])?;
            }
            store.set_lr_scale_prefix("encoder", task_cfg.finetune_rate);
            train_islr(cfg, &model, &mut store, samples, &train_idx, &task_cfg)?;
            let (m, p) = eval_islr(&model, &store, samples, &eval_idx)?;
            (m, p, store)
        }
        Task::Cslr => {
            let (mut store, model, task_cfg) = build_cslr(cfg, samples)?;
            if let Some(p) = pretrained {
                load_pretrained(p)?.apply(&mut store, &["encoder"])?;
            }
            store.set_lr_scale_prefix("encoder", task_cfg.finetune_rate);
            train_cslr(cfg, &model, &mut store, samples, &train_idx)?;
            let (m, p) = eval_cslr(&model, &store, samples, &eval_idx, task_cfg.beam_width)?;
            (m, p, store)
        }
        Task::Slt => {
            let (mut store, model, vocab, task_cfg) = build_slt(cfg, samples)?;
            if let Some(p) = pretrained {
                load_pretrained(p)?.apply(&mut store, &["encoder"])?;
            }
            store.set_lr_scale_prefix("encoder", task_cfg.finetune_rate);
            train_slt(cfg, &model, &mut store, &vocab, samples, &train_idx, &task_cfg)?;
            let (m, p) = eval_slt(&model, &store, &vocab, samples, &eval_idx, task_cfg.beam_width)?;
            (m, p, store)
        }
        Task::Slrt => {
            let (mut store, model, bank, task_cfg) = build_slrt(cfg, samples)?;
            if let Some(p) = pretrained {
                let prefixes: Vec<&str> = if cfg.bool_of("task.reuse_projectors") {
                    vec!["encoder", "proj", "stc"]
                } else {
                    vec!["encoder"]
                };
                load_pretrained(p)?.apply(&mut store, &prefixes)?;
            }
            store.set_lr_scale_prefix("encoder", task_cfg.finetune_rate);
            train_slrt(cfg, &model, &mut store, &bank, samples, &train_idx)?;
            let (m, p) = eval_slrt(cfg, &model, &store, &bank, samples, &eval_idx)?;
            (m, p, store)
        }
    };

    let stem = out_dir.join(task.name());
    save_checkpoint(
        &stem,
        &store,
        task.name(),
        cfg.to_json(),
        cfg.hash(),
        cfg.usize_of("epochs").saturating_sub(1),
        Some(corpus.fingerprint.clone()),
    )?;
    let report = TaskReport {
        task: task.name().to_string(),
        metrics: metrics_map,
        config_hash: cfg.hash(),
        seed,
        n_eval: eval_idx.len(),
    };
    write_json(&out_dir.join("report.json"), &serde_json::to_value(&report)?)?;
    write_predictions(&out_dir.join("predictions.jsonl"), &preds)?;
    Ok(report)
}

/// Rebuilds a saved task model and re-runs its deterministic evaluation.
pub fn evaluate(
    task: Task,
    model_stem: &Path,
    corpus_root: &Path,
    out_dir: &Path,
    split_override: Option<&str>,
) -> Result<TaskReport> {
    let ckpt = load_checkpoint(model_stem)?;
    if ckpt.meta.kind != task.name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind '{}' does not match task '{}'",
            ckpt.meta.kind,
            task.name()
        )));
    }
    let mut cfg = RunConfig::from_json(&ckpt.meta.config)?;
    if let Some(split) = split_override {
        cfg.set_value("eval.split", split.into())?;
    }
    cfg.validate()?;
    let corpus = load_training_corpus(corpus_root)?;
    let samples = &corpus.samples;
    let (_, eval_idx) =
        split_indices(samples.len(), cfg.str_of("eval.split"), cfg.f64_of("eval.holdout_frac"));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let (metrics_map, preds) = match task {
        Task::Islr => {
            let (mut store, model, _) = build_islr(&cfg, samples)?;
            ckpt.apply_all(&mut store)?;
            eval_islr(&model, &store, samples, &eval_idx)?
        }
        Task::Cslr => {
            let (mut store, model, task_cfg) = build_cslr(&cfg, samples)?;
            ckpt.apply_all(&mut store)?;
            eval_cslr(&model, &store, samples, &eval_idx, task_cfg.beam_width)?
        }
        Task::Slt => {
            let (mut store, model, vocab, task_cfg) = build_slt(&cfg, samples)?;
            ckpt.apply_all(&mut store)?;
            eval_slt(&model, &store, &vocab, samples, &eval_idx, task_cfg.beam_width)?
        }
        Task::Slrt => {
            let (mut store, model, bank, _) = build_slrt(&cfg, samples)?;
            ckpt.apply_all(&mut store)?;
            eval_slrt(&cfg, &model, &store, &bank, samples, &eval_idx)?
        }
    };
    let report = TaskReport {
        task: task.name().to_string(),
        metrics: metrics_map,
        config_hash: cfg.hash(),
        seed: cfg.u64_of("seed"),
        n_eval: eval_idx.len(),
    };
    write_json(&out_dir.join("report.json"), &serde_json::to_value(&report)?)?;
    write_predictions(&out_dir.join("predictions.jsonl"), &preds)?;
    Ok(report)
}

fn build_islr(
    cfg: &RunConfig,
    samples: &[SignTextSample],
) -> Result<(ParamStore, IslrModel, TaskConfig)> {
    let mut task_cfg = cfg.task_config(Task::Islr);
    task_cfg.num_classes = gloss_class_count(samples)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64_of("seed"));
    let model = IslrModel::new(
        &mut store,
        cfg.model_config()?,
        &KeypointLayout::default_79(),
        &task_cfg,
        &mut rng,
    )?;
    Ok((store, model, task_cfg))
}

fn train_islr(
    cfg: &RunConfig,
    model: &IslrModel,
    store: &mut ParamStore,
    samples: &[SignTextSample],
    train_idx: &[usize],
    task_cfg: &TaskConfig,
) -> Result<()> {
    let seed = cfg.u64_of("seed");
    let epochs = cfg.usize_of("epochs");
    let batch_size = cfg.usize_of("batch_size").max(1);
    let grad_clip = cfg.f64_of("grad_clip");
    let dropout_p = cfg.model_config()?.dropout;
    let steps = epochs * train_idx.len().div_ceil(batch_size);
    let schedule = cfg.schedule(steps)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.f64_of("weight_decay"), ..AdamWConfig::default() },
        store,
    );
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut epoch_rng(seed, epoch, 11));
        let mut sample_rng = epoch_rng(seed, epoch, 12);
        let mut dropout = Dropout { p: dropout_p, rng: epoch_rng(seed, epoch, 13) };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            store.zero_grads();
            let batch: Vec<(&crate::pose_data::PoseSequence, usize)> = chunk
                .iter()
                .map(|&i| Ok((&samples[i].pose, single_gloss_label(&samples[i])?)))
                .collect::<Result<_>>()?;
            let mut dref = Some(&mut dropout);
            let loss = model.batch_loss(
                &mut tape,
                store,
                &batch,
                task_cfg.label_smoothing,
                SampleMode::Random,
                &mut sample_rng,
                &mut dref,
            )?;
            let mut grads = tape.backward(loss);
            store.accumulate(&tape, &mut grads);
            if grad_clip > 0.0 {
                store.clip_grad_norm(grad_clip);
            }
            opt.step(store, schedule.lr_at(step));
            step += 1;
            loss_sum += tape.value(loss)[[0, 0]];
            batches += 1;
        }
        log::debug!("islr epoch {epoch}: loss {:.6}", loss_sum / batches.max(1) as f64);
    }
    Ok(())
}

fn eval_islr(
    model: &IslrModel,
    store: &ParamStore,
    samples: &[SignTextSample],
    eval_idx: &[usize],
) -> Result<(BTreeMap<String, f64>, Vec<PredRecord>)> {
    let mut scores = Vec::with_capacity(eval_idx.len());
    let mut labels = Vec::with_capacity(eval_idx.len());
    let mut preds = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        let s = &samples[i];
        let label = single_gloss_label(s)?;
        let row = model.predict(store, &s.pose)?;
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap();
        preds.push(PredRecord {
            id: s.id.clone(),
            reference: crate::synthetic::gloss_name(label),
            hypothesis: crate::synthetic::gloss_name(best),
        });
        scores.push(row);
        labels.push(label);
    }
    let mut m = BTreeMap::new();
    m.insert(
        "top1_per_instance".into(),
        metrics::accuracy(&scores, &labels, 1, AccuracyMode::PerInstance)?,
    );
    m.insert(
        "top1_per_class".into(),
        metrics::accuracy(&scores, &labels, 1, AccuracyMode::PerClass)?,
    );
    m.insert(
        "top5_per_instance".into(),
        metrics::accuracy(&scores, &labels, 5, AccuracyMode::PerInstance)?,
    );
    Ok((m, preds))
}

fn build_cslr(
    cfg: &RunConfig,
    samples: &[SignTextSample],
) -> Result<(ParamStore, CslrModel, TaskConfig)> {
    let mut task_cfg = cfg.task_config(Task::Cslr);
    task_cfg.gloss_vocab = gloss_class_count(samples)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64_of("seed"));
    let model = CslrModel::new(
        &mut store,
        cfg.model_config()?,
        &KeypointLayout::default_79(),
        &task_cfg,
        &mut rng,
    )?;
    Ok((store, model, task_cfg))
}

/// Gloss ids shift up by one to clear the reserved blank.
fn ctc_labels(s: &SignTextSample) -> Result<Vec<usize>> {
    let glosses = s
        .gloss_labels
        .as_deref()
        .ok_or_else(|| Error::Config(format!("sample '{}' has no gloss labels", s.id)))?;
    Ok(glosses.iter().map(|g| g + 1).collect())
}

fn train_cslr(
    cfg: &RunConfig,
    model: &CslrModel,
    store: &mut ParamStore,
    samples: &[SignTextSample],
    train_idx: &[usize],
) -> Result<()> {
    let seed = cfg.u64_of("seed");
    let epochs = cfg.usize_of("epochs");
    let batch_size = cfg.usize_of("batch_size").max(1);
    let grad_clip = cfg.f64_of("grad_clip");
    let dropout_p = cfg.model_config()?.dropout;
    let steps = epochs * train_idx.len().div_ceil(batch_size);
    let schedule = cfg.schedule(steps)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.f64_of("weight_decay"), ..AdamWConfig::default() },
        store,
    );
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut epoch_rng(seed, epoch, 21));
        let mut sample_rng = epoch_rng(seed, epoch, 22);
        let mut dropout = Dropout { p: dropout_p, rng: epoch_rng(seed, epoch, 23) };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            store.zero_grads();
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let labels = ctc_labels(s)?;
                let mut dref = Some(&mut dropout);
                match model.loss(
                    &mut tape,
                    store,
                    &s.pose,
                    &labels,
                    SampleMode::Random,
                    &mut sample_rng,
                    &mut dref,
                ) {
                    Ok(l) => terms.push(l),
                    Err(Error::Infeasible { needed, got }) => {
                        log::warn!(
                            "sample '{}' skipped: target needs {needed} frames, model emits {got}",
                            s.id
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
            if terms.is_empty() {
                continue;
            }
            let loss = mean_var(&mut tape, &terms);
            let mut grads = tape.backward(loss);
            store.accumulate(&tape, &mut grads);
            if grad_clip > 0.0 {
                store.clip_grad_norm(grad_clip);
            }
            opt.step(store, schedule.lr_at(step));
            step += 1;
            loss_sum += tape.value(loss)[[0, 0]];
            batches += 1;
        }
        log::debug!("cslr epoch {epoch}: loss {:.6}", loss_sum / batches.max(1) as f64);
    }
    Ok(())
}

fn eval_cslr(
    model: &CslrModel,
    store: &ParamStore,
    samples: &[SignTextSample],
    eval_idx: &[usize],
    beam: usize,
) -> Result<(BTreeMap<String, f64>, Vec<PredRecord>)> {
    let (mut edits, mut ref_len) = (0usize, 0usize);
    let (mut subs, mut dels, mut inss) = (0usize, 0usize, 0usize);
    let mut preds = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        let s = &samples[i];
        let reference = ctc_labels(s)?;
        let hypothesis = model.decode(store, &s.pose, beam)?;
        let b = metrics::wer(&reference, &hypothesis)?;
        edits += b.substitutions + b.deletions + b.insertions;
        subs += b.substitutions;
        dels += b.deletions;
        inss += b.insertions;
        ref_len += b.ref_len;
        let render = |ids: &[usize]| {
            ids.iter()
                .map(|&l| crate::synthetic::gloss_name(l - 1))
                .collect::<Vec<_>>()
                .join(" ")
        };
        preds.push(PredRecord {
            id: s.id.clone(),
            reference: render(&reference),
            hypothesis: render(&hypothesis),
        });
    }
    let mut m = BTreeMap::new();
    m.insert("wer".into(), 100.0 * edits as f64 / ref_len.max(1) as f64);
    m.insert("substitutions".into(), subs as f64);
    m.insert("deletions".into(), dels as f64);
    m.insert("insertions".into(), inss as f64);
    Ok((m, preds))
}

fn build_slt(
    cfg: &RunConfig,
    samples: &[SignTextSample],
) -> Result<(ParamStore, SltModel, Vocab, TaskConfig)> {
    let vocab = Vocab::build(samples.iter().filter_map(|s| s.text.as_deref()));
    let mut task_cfg = cfg.task_config(Task::Slt);
    task_cfg.text_vocab = vocab.len();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64_of("seed"));
    let model = SltModel::new(
        &mut store,
        cfg.model_config()?,
        &KeypointLayout::default_79(),
        &task_cfg,
        vocab.non_generable(),
        &mut rng,
    )?;
    Ok((store, model, vocab, task_cfg))
}

/// Translation target: word ids followed by the end marker.
fn slt_target_ids(vocab: &Vocab, s: &SignTextSample) -> Result<Vec<usize>> {
    let text = s
        .text
        .as_deref()
        .ok_or_else(|| Error::Config(format!("sample '{}' has no text", s.id)))?;
    let mut ids: Vec<usize> = tokenize(text).iter().map(|w| vocab.id_of(w)).collect();
    ids.push(EOS);
    Ok(ids)
}

fn train_slt(
    cfg: &RunConfig,
    model: &SltModel,
    store: &mut ParamStore,
    vocab: &Vocab,
    samples: &[SignTextSample],
    train_idx: &[usize],
    task_cfg: &TaskConfig,
) -> Result<()> {
    let seed = cfg.u64_of("seed");
    let epochs = cfg.usize_of("epochs");
    let batch_size = cfg.usize_of("batch_size").max(1);
    let grad_clip = cfg.f64_of("grad_clip");
    let dropout_p = cfg.model_config()?.dropout;
    let steps = epochs * train_idx.len().div_ceil(batch_size);
    let schedule = cfg.schedule(steps)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.f64_of("weight_decay"), ..AdamWConfig::default() },
        store,
    );
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut epoch_rng(seed, epoch, 31));
        let mut sample_rng = epoch_rng(seed, epoch, 32);
        let mut dropout = Dropout { p: dropout_p, rng: epoch_rng(seed, epoch, 33) };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            store.zero_grads();
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let target = slt_target_ids(vocab, s)?;
                let mut dref = Some(&mut dropout);
                terms.push(model.loss(
                    &mut tape,
                    store,
                    &s.pose,
                    &target,
                    task_cfg.label_smoothing,
                    SampleMode::Random,
                    &mut sample_rng,
                    &mut dref,
                )?);
            }
            let loss = mean_var(&mut tape, &terms);
            let mut grads = tape.backward(loss);
            store.accumulate(&tape, &mut grads);
            if grad_clip > 0.0 {
                store.clip_grad_norm(grad_clip);
            }
            opt.step(store, schedule.lr_at(step));
            step += 1;
            loss_sum += tape.value(loss)[[0, 0]];
            batches += 1;
        }
        log::debug!("slt epoch {epoch}: loss {:.6}", loss_sum / batches.max(1) as f64);
    }
    Ok(())
}

fn eval_slt(
    model: &SltModel,
    store: &ParamStore,
    vocab: &Vocab,
    samples: &[SignTextSample],
    eval_idx: &[usize],
    beam: usize,
) -> Result<(BTreeMap<String, f64>, Vec<PredRecord>)> {
    let mut pairs = Vec::with_capacity(eval_idx.len());
    let mut preds = Vec::with_capacity(eval_idx.len());
    let mut rouge_sum = 0.0;
    let mut truncated = 0usize;
    for &i in eval_idx {
        let s = &samples[i];
        let reference = tokenize(
            s.text
                .as_deref()
                .ok_or_else(|| Error::Config(format!("sample '{}' has no text", s.id)))?,
        );
        let gen = model.generate(store, &s.pose, beam)?;
        if gen.truncated {
            truncated += 1;
            log::warn!("sample '{}': generation hit the length cap", s.id);
        }
        let hypothesis = vocab.decode_words(&gen.tokens);
        rouge_sum += metrics::rouge_l(&reference, &hypothesis);
        preds.push(PredRecord {
            id: s.id.clone(),
            reference: reference.join(" "),
            hypothesis: hypothesis.join(" "),
        });
        pairs.push((reference, hypothesis));
    }
    let mut m = BTreeMap::new();
    m.insert("bleu1".into(), metrics::bleu(&pairs, 1));
    m.insert("bleu2".into(), metrics::bleu(&pairs, 2));
    m.insert("bleu4".into(), metrics::bleu(&pairs, 4));
    m.insert("rouge_l".into(), rouge_sum / eval_idx.len().max(1) as f64);
    m.insert("truncated".into(), truncated as f64);
    Ok((m, preds))
}

fn build_slrt(
    cfg: &RunConfig,
    samples: &[SignTextSample],
) -> Result<(ParamStore, SlrtModel, TextBank, TaskConfig)> {
    let bank = build_text_bank(samples, cfg.text_config())?;
    let task_cfg = cfg.task_config(Task::Slrt);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64_of("seed"));
    let model = SlrtModel::new(
        &mut store,
        cfg.model_config()?,
        &KeypointLayout::default_79(),
        bank.encoder.feature_dim(),
        &task_cfg,
        cfg.f64_of("loss.tau_init"),
        &mut rng,
    )?;
    Ok((store, model, bank, task_cfg))
}

fn paired_feats<'a>(
    bank: &'a TextBank,
    samples: &'a [SignTextSample],
    idx: &[usize],
) -> Result<Vec<(&'a crate::pose_data::PoseSequence, &'a Array2<f64>)>> {
    idx.iter()
        .map(|&i| {
            let feats = bank.feats[i]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("sample '{}' has no text", samples[i].id)))?;
            Ok((&samples[i].pose, feats))
        })
        .collect()
}

fn train_slrt(
    cfg: &RunConfig,
    model: &SlrtModel,
    store: &mut ParamStore,
    bank: &TextBank,
    samples: &[SignTextSample],
    train_idx: &[usize],
) -> Result<()> {
    let seed = cfg.u64_of("seed");
    let epochs = cfg.usize_of("epochs");
    let batch_size = cfg.usize_of("batch_size").max(2);
    let grad_clip = cfg.f64_of("grad_clip");
    let dropout_p = cfg.model_config()?.dropout;
    let kind = cfg.similarity_kind()?;
    let steps = epochs * train_idx.len().div_ceil(batch_size);
    let schedule = cfg.schedule(steps)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.f64_of("weight_decay"), ..AdamWConfig::default() },
        store,
    );
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut epoch_rng(seed, epoch, 41));
        let mut sample_rng = epoch_rng(seed, epoch, 42);
        let mut dropout = Dropout { p: dropout_p, rng: epoch_rng(seed, epoch, 43) };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            store.zero_grads();
            let batch = paired_feats(bank, samples, chunk)?;
            let mut dref = Some(&mut dropout);
            // Center sampling keeps train-time clip views identical to the
            // retrieval evaluation's views.
            let loss = model.batch_loss(
                &mut tape,
                store,
                &batch,
                kind,
                SampleMode::Center,
                &mut sample_rng,
                &mut dref,
            )?;
            let mut grads = tape.backward(loss);
            store.accumulate(&tape, &mut grads);
            if grad_clip > 0.0 {
                store.clip_grad_norm(grad_clip);
            }
            opt.step(store, schedule.lr_at(step));
            model.temperature.clamp(store);
            step += 1;
            loss_sum += tape.value(loss)[[0, 0]];
            batches += 1;
        }
        log::debug!("slrt epoch {epoch}: loss {:.6}", loss_sum / batches.max(1) as f64);
    }
    Ok(())
}

fn eval_slrt(
    cfg: &RunConfig,
    model: &SlrtModel,
    store: &ParamStore,
    bank: &TextBank,
    samples: &[SignTextSample],
    eval_idx: &[usize],
) -> Result<(BTreeMap<String, f64>, Vec<PredRecord>)> {
    let kind = cfg.similarity_kind()?;
    let pairs = paired_feats(bank, samples, eval_idx)?;
    let sim = model.eval_similarity(store, &pairs, kind)?;
    let ranks = SlrtModel::rank_both_directions(&sim);
    let v2t = metrics::retrieval_metrics(&ranks.v2t)?;
    let t2v = metrics::retrieval_metrics(&ranks.t2v)?;
    let mut m = BTreeMap::new();
    m.insert("v2t_r1".into(), v2t.r_at_1);
    m.insert("v2t_r5".into(), v2t.r_at_5);
    m.insert("v2t_r10".into(), v2t.r_at_10);
    m.insert("v2t_medr".into(), v2t.med_r);
    m.insert("t2v_r1".into(), t2v.r_at_1);
    m.insert("t2v_r5".into(), t2v.r_at_5);
    m.insert("t2v_r10".into(), t2v.r_at_10);
    m.insert("t2v_medr".into(), t2v.med_r);
    let mut preds = Vec::with_capacity(eval_idx.len());
    for (row, &i) in eval_idx.iter().enumerate() {
        let best = sim
            .row(row)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap();
        let as_text = |j: usize| samples[eval_idx[j]].text.clone().unwrap_or_default();
        preds.push(PredRecord {
            id: samples[i].id.clone(),
            reference: as_text(row),
            hypothesis: as_text(best),
        });
    }
    Ok((m, preds))
}
