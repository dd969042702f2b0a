//! Training orchestration: reproducibility, resume rules, frozen parameter
//! groups, and evaluation that replays fine-tuning reports exactly.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signkit::checkpoint::{load_checkpoint, Checkpoint};
use signkit::config::RunConfig;
use signkit::encoder::SignEncoder;
use signkit::error::Error;
use signkit::objectives::{batch_similarity_matrix, stc_loss, Projectors, SimilarityKind, Temperature};
use signkit::pose_data::KeypointLayout;
use signkit::synthetic::{build_corpus, SynthesisConfig};
use signkit::task::Task;
use signkit::text::TextFeatureSource;
use signkit::train::{
    build_text_bank, evaluate, finetune, gloss_class_count, load_training_corpus, pretrain,
    split_indices,
};
use tapegrad::{AdamW, AdamWConfig, ParamStore, Tape};

fn tiny_corpus(root: &Path, n: usize, seed: u64) -> PathBuf {
    let cfg = SynthesisConfig { vocab_size: 4, seed, ..Default::default() };
    build_corpus(&cfg, n, root).unwrap();
    root.to_path_buf()
}

/// Shrunken model and single-epoch schedule so each run takes milliseconds.
fn quick_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "epochs=1",
        "batch_size=4",
        "base_lr=1e-3",
        "model.d_g=16",
        "model.d1=24",
        "model.d2=24",
        "model.n_blocks=1",
        "model.gcn_layers=1",
        "model.dropout=0.0",
        "model.decoder_hidden=32",
        "task.sampled_frames=8",
        "text.d_t=16",
        "text.n_blocks=1",
    ] {
        cfg.apply_set(kv).unwrap();
    }
    cfg
}

fn tensors_with_prefix<'a>(ckpt: &'a Checkpoint, prefix: &str) -> Vec<(&'a str, &'a Array2<f64>)> {
    ckpt.params
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, v)| (name.as_str(), v))
        .collect()
}

fn prefix_equal(a: &Checkpoint, b: &Checkpoint, prefix: &str) -> bool {
    let (ta, tb) = (tensors_with_prefix(a, prefix), tensors_with_prefix(b, prefix));
    assert!(!ta.is_empty(), "no tensors under '{prefix}'");
    assert_eq!(ta.len(), tb.len());
    ta.iter().zip(&tb).all(|((na, va), (nb, vb))| na == nb && va == vb)
}

#[test]
fn splits_reserve_the_corpus_tail_for_holdout() {
    assert_eq!(split_indices(10, "train", 0.2), ((0..10).collect(), (0..10).collect()));
    let (train, eval) = split_indices(10, "holdout", 0.2);
    assert_eq!(train, (0..8).collect::<Vec<_>>());
    assert_eq!(eval, vec![8, 9]);
    // The holdout never swallows the whole corpus and never goes empty.
    assert_eq!(split_indices(10, "holdout", 0.0).1, vec![9]);
    assert_eq!(split_indices(2, "holdout", 0.9).1, vec![1]);
    // A single sample cannot be split and falls back to in-sample eval.
    assert_eq!(split_indices(1, "holdout", 0.2), (vec![0], vec![0]));
}

#[test]
fn gloss_class_count_scans_every_label() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(dir.path(), 8, 5);
    let corpus = load_training_corpus(&root).unwrap();
    assert_eq!(gloss_class_count(&corpus.samples).unwrap(), 4);
}

#[test]
fn pretraining_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let cfg = quick_cfg();

    let out_a = pretrain(&cfg, &root, &dir.path().join("a"), None).unwrap();
    let out_b = pretrain(&cfg, &root, &dir.path().join("b"), None).unwrap();
    assert_eq!(out_a.epoch_losses.len(), 1);
    assert_eq!(out_a.epoch_losses[0].pr, out_b.epoch_losses[0].pr);
    assert_eq!(out_a.epoch_losses[0].stc, out_b.epoch_losses[0].stc);
    let bytes = |stem: &Path| std::fs::read(stem.with_extension("bin")).unwrap();
    assert_eq!(bytes(&out_a.stem), bytes(&out_b.stem));

    let mut other = quick_cfg();
    other.apply_set("seed=8").unwrap();
    let out_c = pretrain(&other, &root, &dir.path().join("c"), None).unwrap();
    assert_ne!(out_a.epoch_losses[0].pr, out_c.epoch_losses[0].pr);
}

#[test]
fn pretraining_records_losses_and_a_typed_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let mut cfg = quick_cfg();
    cfg.apply_set("epochs=2").unwrap();

    let out = pretrain(&cfg, &root, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.epoch_losses.len(), 2);
    assert!(out.epoch_losses.iter().all(|l| l.pr.is_finite() && l.stc.is_finite()));
    assert!(out.epoch_losses.iter().all(|l| l.pr > 0.0 && l.stc > 0.0));

    let ckpt = load_checkpoint(&out.stem).unwrap();
    assert_eq!(ckpt.meta.kind, "pretrain");
    assert_eq!(ckpt.meta.epoch, 1);
    assert_eq!(ckpt.meta.config_hash, out.config_hash);
    assert_eq!(
        ckpt.meta.corpus_fingerprint.as_deref(),
        Some(signkit::checkpoint::corpus_fingerprint(&root).unwrap().as_str())
    );
    assert!(dir.path().join("run").join("pretrain_report.json").exists());
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let cfg = quick_cfg();
    let out = pretrain(&cfg, &root, &dir.path().join("run"), None).unwrap();

    let mut drifted = quick_cfg();
    drifted.apply_set("base_lr=2e-3").unwrap();
    let err = pretrain(&drifted, &root, &dir.path().join("resumed"), Some(&out.stem))
        .map(|_| ())
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");

    // The identical configuration resumes past its own final epoch: no
    // further training, but no refusal either.
    let again = pretrain(&cfg, &root, &dir.path().join("noop"), Some(&out.stem)).unwrap();
    assert!(again.epoch_losses.is_empty());
}

#[test]
fn disabled_contrastive_term_leaves_projection_heads_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let mut weight_1 = quick_cfg();
    weight_1.apply_set("loss.lambda=0").unwrap();
    let mut weight_half = quick_cfg();
    weight_half.apply_set("loss.lambda=0").unwrap();
    weight_half.apply_set("loss.pr_weight=0.5").unwrap();

    let a = pretrain(&weight_1, &root, &dir.path().join("a"), None).unwrap();
    let b = pretrain(&weight_half, &root, &dir.path().join("b"), None).unwrap();
    let (a, b) = (load_checkpoint(&a.stem).unwrap(), load_checkpoint(&b.stem).unwrap());

    // Both runs froze the contrastive heads at their seed-matched inits,
    // while the differing reconstruction weight moved everything else.
    assert!(prefix_equal(&a, &b, "proj."));
    assert!(prefix_equal(&a, &b, "stc."));
    assert!(!prefix_equal(&a, &b, "encoder."));
    assert!(!prefix_equal(&a, &b, "decoder."));
}

#[test]
fn disabled_reconstruction_term_leaves_the_decoder_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let mut full = quick_cfg();
    full.apply_set("loss.pr_weight=0").unwrap();
    let mut half = quick_cfg();
    half.apply_set("loss.pr_weight=0").unwrap();
    half.apply_set("loss.lambda=0.5").unwrap();

    let a = pretrain(&full, &root, &dir.path().join("a"), None).unwrap();
    let b = pretrain(&half, &root, &dir.path().join("b"), None).unwrap();
    let (a, b) = (load_checkpoint(&a.stem).unwrap(), load_checkpoint(&b.stem).unwrap());

    assert!(prefix_equal(&a, &b, "decoder."));
    assert!(!prefix_equal(&a, &b, "proj."));
    assert!(!prefix_equal(&a, &b, "encoder."));
}

#[test]
fn text_encoder_is_bitwise_frozen_through_a_training_step() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(dir.path(), 8, 5);
    let cfg = quick_cfg();
    let corpus = load_training_corpus(&root).unwrap();
    let bank = build_text_bank(&corpus.samples, cfg.text_config()).unwrap();
    let fingerprint = bank.encoder.param_fingerprint();

    // One full contrastive optimizer step fed by the bank's features.
    let layout = KeypointLayout::default_79();
    let model_cfg = cfg.model_config().unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let projectors = Projectors::new(&mut store, &model_cfg, bank.encoder.feature_dim(), &mut rng);
    let encoder = SignEncoder::new(&mut store, model_cfg, &layout, &mut rng).unwrap();
    let temperature = Temperature::new(&mut store);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let probe = store.by_name("proj.sign.l1.w").unwrap();
    let before = store.value(probe).clone();

    let mut tape = Tape::new();
    let mut signs = Vec::new();
    let mut texts = Vec::new();
    for i in 0..3 {
        let enc = encoder.forward(&mut tape, &store, &corpus.samples[i].pose, &mut None).unwrap();
        signs.push(projectors.project_sign(&mut tape, &store, enc.fused));
        let f = tape.constant(bank.feats[i].clone().unwrap());
        texts.push(projectors.project_text(&mut tape, &store, f));
    }
    let sim = batch_similarity_matrix(&mut tape, &signs, &texts, SimilarityKind::Fine).unwrap();
    let loss = stc_loss(&mut tape, sim, &store, &temperature);
    let mut grads = tape.backward(loss);
    store.accumulate(&tape, &mut grads);
    opt.step(&mut store, 1e-3);
    temperature.clamp(&mut store);

    assert_ne!(store.value(probe), &before, "the step itself must move weights");
    assert_eq!(bank.encoder.param_fingerprint(), fingerprint);
}

#[test]
fn zero_finetune_rate_freezes_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let run = |base_lr: &str, rate: &str, out: &str| {
        let mut cfg = quick_cfg();
        cfg.apply_set(&format!("base_lr={base_lr}")).unwrap();
        cfg.apply_set(&format!("task.finetune_rate={rate}")).unwrap();
        let out = dir.path().join(out);
        finetune(&cfg, Task::Islr, &root, None, &out).unwrap();
        load_checkpoint(&out.join("islr")).unwrap()
    };

    // With rate 0 the encoder never moves, so two different learning rates
    // land on the same (seed-matched) encoder while the head diverges.
    let a = run("3e-3", "0.0", "a");
    let b = run("1e-3", "0.0", "b");
    assert!(prefix_equal(&a, &b, "encoder."));
    assert!(!prefix_equal(&a, &b, "islr.head"));

    // A positive rate lets gradients through.
    let c = run("3e-3", "0.5", "c");
    assert!(!prefix_equal(&a, &c, "encoder."));
}

#[test]
fn evaluation_replays_the_finetune_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let mut cfg = quick_cfg();
    cfg.apply_set("epochs=2").unwrap();
    let out = dir.path().join("run");
    let report = finetune(&cfg, Task::Islr, &root, None, &out).unwrap();
    assert_eq!(report.n_eval, 8);
    assert!(report.metrics.contains_key("top1_per_instance"));

    let replay = evaluate(Task::Islr, &out.join("islr"), &root, &dir.path().join("replay"), None).unwrap();
    assert_eq!(replay.metrics, report.metrics);
    assert_eq!(replay.config_hash, report.config_hash);

    // The split override narrows evaluation to the corpus tail.
    let tail =
        evaluate(Task::Islr, &out.join("islr"), &root, &dir.path().join("tail"), Some("holdout"))
            .unwrap();
    assert_eq!(tail.n_eval, 2);

    let err =
        evaluate(Task::Cslr, &out.join("islr"), &root, &dir.path().join("bad"), None).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}

#[test]
fn finetuning_validates_the_pretrained_checkpoint_kind() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let cfg = quick_cfg();
    let out = dir.path().join("islr_run");
    finetune(&cfg, Task::Islr, &root, None, &out).unwrap();

    let err = finetune(&cfg, Task::Islr, &root, Some(&out.join("islr")), &dir.path().join("x"))
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn finetuning_starts_from_the_pretrained_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let cfg = quick_cfg();
    let pre = pretrain(&cfg, &root, &dir.path().join("pre"), None).unwrap();

    // Freezing the encoder makes the hand-off visible: the fine-tuned
    // checkpoint carries the pre-trained tensors bit for bit.
    let mut frozen = quick_cfg();
    frozen.apply_set("task.finetune_rate=0.0").unwrap();
    let out = dir.path().join("ft");
    finetune(&frozen, Task::Islr, &root, Some(&pre.stem), &out).unwrap();
    let pre_ckpt = load_checkpoint(&pre.stem).unwrap();
    let ft_ckpt = load_checkpoint(&out.join("islr")).unwrap();
    assert!(prefix_equal(&pre_ckpt, &ft_ckpt, "encoder."));
}

#[test]
fn every_task_pipeline_produces_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = tiny_corpus(&dir.path().join("corpus"), 8, 5);
    let cfg = quick_cfg();
    let pre = pretrain(&cfg, &root, &dir.path().join("pre"), None).unwrap();

    let mut slrt_cfg = quick_cfg();
    slrt_cfg.apply_set("task.reuse_projectors=true").unwrap();
    let cases = [
        (Task::Cslr, &cfg, "wer"),
        (Task::Slt, &cfg, "bleu4"),
        (Task::Slrt, &slrt_cfg, "v2t_r1"),
    ];
    for (task, task_cfg, key) in cases {
        let out = dir.path().join(task.name());
        let report = finetune(task_cfg, task, &root, Some(&pre.stem), &out).unwrap();
        assert!(report.metrics.contains_key(key), "{task:?} missing {key}");
        assert!(report.metrics.values().all(|v| v.is_finite()));
        assert!(out.join("report.json").exists());
        assert!(out.join("predictions.jsonl").exists());
    }
}
