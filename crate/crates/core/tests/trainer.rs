use std::path::Path;
use std::process::Command;

use taed::data::{generate, Dataset, SynthTaskConfig};
use taed::model::{Checkpoint, Model, ModelConfig, ModelKind};
use taed::train::{
    effective_config, evaluate, load_pretrained, sweep_blank_penalty, train, DecodeMode, EvalOptions, Quality,
    TrainConfig,
};

fn task() -> SynthTaskConfig {
    SynthTaskConfig {
        vocab_size: 8,
        feature_dim: 4,
        utterance_length_range: [2, 4],
        ..Default::default()
    }
}

fn small(kind: ModelKind, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        feature_dim: 4,
        vocab_size: 8,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        init_seed: seed,
        ..Default::default()
    }
}

fn quick(updates: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup_steps: 10,
        batch_utterances: 4,
        max_updates: updates,
        checkpoint_every: 10,
        keep_best_k: 3,
        ..Default::default()
    }
}

fn biased(kind: ModelKind, blank_bias: f64) -> Model {
    let mut m = Model::new(small(kind, 3)).unwrap();
    let blank = m.config().blank();
    let idx = m.params().names().iter().position(|n| n == "joiner.out.bias").unwrap();
    m.params_mut().tensors_mut()[idx].data_mut()[blank] += blank_bias;
    m
}

#[test]
fn overfits_a_single_utterance() {
    let one = generate(
        &SynthTaskConfig {
            noise_std: 0.0,
            ..task()
        },
        1,
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch_utterances: 1,
        max_updates: 200,
        checkpoint_every: 100,
        dropout: 0.0,
        ..quick(200)
    };
    for kind in [ModelKind::Taed, ModelKind::Transducer] {
        let out = train(Model::new(small(kind, 1)).unwrap(), &effective_config(kind, &cfg), &one, &one, None).unwrap();
        let steps = &out.manifest.steps;
        let (first, last) = (steps[0].total, steps.last().unwrap().total);
        assert!(last < 0.1 * first, "{kind}: {first} -> {last}");
        if kind == ModelKind::Transducer {
            assert!(steps.iter().all(|s| s.aed.is_none()));
        }
    }
}

#[test]
fn loss_trajectory_is_reproducible() {
    let data = generate(&task(), 16, 1).unwrap();
    let run = || train(Model::new(small(ModelKind::Taed, 4)).unwrap(), &quick(10), &data, &data, None).unwrap();
    let (a, b) = (run(), run());
    assert!((a.manifest.steps[9].total - b.manifest.steps[9].total).abs() < 1e-6);
    assert_eq!(a.manifest.steps, b.manifest.steps);
    let other = train(
        Model::new(small(ModelKind::Taed, 4)).unwrap(),
        &TrainConfig { seed: 1, ..quick(10) },
        &data,
        &data,
        None,
    )
    .unwrap();
    assert_ne!(other.manifest.steps, a.manifest.steps);
}

#[test]
fn zero_weight_builds_no_decoder_loss() {
    let data = generate(&task(), 8, 1).unwrap();
    let cfg = TrainConfig {
        aed_weight: 0.0,
        ..quick(3)
    };
    let out = train(Model::new(small(ModelKind::Taed, 0)).unwrap(), &cfg, &data, &data, None).unwrap();
    assert!(out.manifest.steps.iter().all(|s| s.aed.is_none() && s.total == s.rnnt));
    let with = train(Model::new(small(ModelKind::Taed, 0)).unwrap(), &quick(3), &data, &data, None).unwrap();
    assert!(with.manifest.steps.iter().all(|s| s.aed.is_some()));
}

#[test]
fn keeps_best_checkpoints_on_disk() {
    let data = generate(&task(), 12, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(Model::new(small(ModelKind::Taed, 5)).unwrap(), &quick(50), &data, &data, Some(dir.path())).unwrap();
    let kept = &out.manifest.checkpoints;
    assert_eq!(kept.len(), 3);
    assert!(kept.windows(2).all(|w| (w[0].validation_loss, w[0].step) <= (w[1].validation_loss, w[1].step)));
    let on_disk = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("step"))
        .count();
    assert_eq!(on_disk, 3);
    for name in ["averaged.ckpt", "last.ckpt", "manifest.json"] {
        assert!(dir.path().join(name).exists());
    }
    let paths: Vec<_> = kept.iter().map(|c| c.path.clone().unwrap()).collect();
    let from_files = Checkpoint::average_files(&paths).unwrap();
    assert_eq!(
        from_files.to_bytes().unwrap(),
        Checkpoint::load(&dir.path().join("averaged.ckpt")).unwrap().to_bytes().unwrap()
    );
}

#[test]
fn averaging_is_linear() {
    let a = Checkpoint::from_model(&Model::new(small(ModelKind::Taed, 1)).unwrap());
    let b = Checkpoint::from_model(&Model::new(small(ModelKind::Taed, 2)).unwrap());
    assert_eq!(Checkpoint::average(std::slice::from_ref(&a)).unwrap().tensors, a.tensors);
    assert_eq!(Checkpoint::average(&[a.clone(), a.clone()]).unwrap().tensors, a.tensors);
    let zero = Checkpoint::average(&[a.clone(), a.scaled(-1.0)]).unwrap();
    assert!(zero.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    let scaled = Checkpoint::average(&[a.scaled(2.0), b.scaled(2.0)]).unwrap();
    let plain = Checkpoint::average(&[a, b]).unwrap().scaled(2.0);
    for (x, y) in scaled.tensors.iter().zip(&plain.tensors) {
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() <= 1e-6 * q.abs().max(1.0));
        }
    }
    let other = Checkpoint::from_model(&Model::new(ModelConfig { d_model: 8, ..small(ModelKind::Taed, 1) }).unwrap());
    assert!(Checkpoint::average(&[plain, other]).is_err());
}

#[test]
fn pretrained_encoder_is_copied() {
    let donor = Checkpoint::from_model(&Model::new(small(ModelKind::Transducer, 8)).unwrap());
    let mut m = Model::new(small(ModelKind::Taed, 9)).unwrap();
    let n = load_pretrained(&mut m, &donor, "encoder.").unwrap();
    assert!(n > 0);
    let mine = Checkpoint::from_model(&m);
    for t in donor.tensors.iter().filter(|t| t.name.starts_with("encoder.")) {
        assert_eq!(mine.tensors.iter().find(|u| u.name == t.name).unwrap().data, t.data);
    }
    assert!(load_pretrained(&mut m, &donor, "nothing.").is_err());
}

#[test]
fn tau_sweep_produces_nine_rows() {
    let m = biased(ModelKind::Taed, 1.0);
    let dev = generate(&task(), 10, 4).unwrap();
    let sweep = sweep_blank_penalty(&m, &dev, &EvalOptions::offline(), 4.0, 0.5, Quality::Wer).unwrap();
    assert_eq!(sweep.rows.len(), 9);
    assert!(sweep.rows.windows(2).all(|w| w[0].tau < w[1].tau));
    assert_eq!(sweep.rows[0].tau, 0.0);
    assert_eq!(sweep.rows[8].tau, 4.0);
    let again = sweep_blank_penalty(&m, &dev, &EvalOptions::offline(), 4.0, 0.5, Quality::Wer).unwrap();
    assert_eq!(again.best_tau, sweep.best_tau);
    let best = sweep.rows.iter().map(|r| r.wer).fold(f64::INFINITY, f64::min);
    let first_best = sweep.rows.iter().find(|r| r.wer == best).unwrap().tau;
    assert_eq!(sweep.best_tau, first_best);
    assert_eq!(sweep.table().lines().count(), 2 + 9 + 1);
}

#[test]
fn streaming_with_huge_chunks_matches_offline() {
    let set = generate(&task(), 12, 6).unwrap();
    for kind in [ModelKind::Taed, ModelKind::Transducer] {
        let m = biased(kind, -1.0);
        let offline = evaluate(&m, &set, &EvalOptions::offline()).unwrap();
        let frames = m.config().encoder_frames(set.longest_frames());
        let streaming = evaluate(&m, &set, &EvalOptions::streaming(frames, 0.0)).unwrap();
        let hyps = |r: &taed::train::EvalReport| r.rows.iter().map(|u| u.hypothesis.clone()).collect::<Vec<_>>();
        assert_eq!(hyps(&offline), hyps(&streaming));
        assert_eq!(offline.wer, streaming.wer);
        assert!(offline.mean_tokens > 0.0);

        assert_eq!(offline.mode, DecodeMode::Offline);
        assert!(offline.al.is_none() && offline.laal.is_none() && offline.dal.is_none());
        assert_eq!(offline.ap, 1.0);
        assert!(streaming.al.is_some());
        assert_eq!(offline.rows.len(), set.len());
        assert_eq!(offline.jsonl().unwrap().lines().count(), set.len() + 1);
    }
}

#[test]
fn smaller_chunks_read_earlier() {
    let set = generate(&task(), 12, 6).unwrap();
    let m = biased(ModelKind::Taed, -1.0);
    let ap: Vec<f64> = [1usize, 2, 4, 1000]
        .iter()
        .map(|&c| evaluate(&m, &set, &EvalOptions::streaming(c, 0.0)).unwrap().ap)
        .collect();
    assert!(ap.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{ap:?}");
}

#[test]
fn rejects_empty_training_set() {
    let data = generate(&task(), 4, 1).unwrap();
    let empty = Dataset {
        config: task(),
        utterances: Vec::new(),
    };
    assert!(train(Model::new(small(ModelKind::Taed, 0)).unwrap(), &quick(2), &empty, &data, None).is_err());
    let bad = TrainConfig { lr: -1.0, ..quick(2) };
    assert!(matches!(
        train(Model::new(small(ModelKind::Taed, 0)).unwrap(), &bad, &data, &data, None),
        Err(taed::Error::Config(_))
    ));
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_taed")).args(args).current_dir(cwd).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn command_line_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "[model]\nvocab_size = 8\nfeature_dim = 4\nd_model = 16\nn_heads = 2\nffn_dim = 32\n\
         encoder_layers = 1\ndecoder_layers = 1\nchunk_frames = 2\n\n\
         [train]\nmax_updates = 20\ncheckpoint_every = 10\nbatch_utterances = 4\nlr = 0.003\nwarmup_steps = 5\n\n\
         [task]\nvocab_size = 8\nfeature_dim = 4\nutterance_length_range = [2, 4]\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let (code, out, err) = cli(args, d);
        assert_eq!(code, 0, "{args:?}\n{out}\n{err}");
        out
    };
    ok(&["generate-data", "--config", "run.toml", "--out", "train.jsonl", "--count", "24", "--seed", "1", "--vocab", "vocab.txt"]);
    ok(&["generate-data", "--config", "run.toml", "--out", "dev.jsonl", "--count", "6", "--seed", "2"]);
    ok(&["train", "--config", "run.toml", "--train", "train.jsonl", "--dev", "dev.jsonl", "--out", "run", "--quiet"]);
    assert!(d.join("run/averaged.ckpt").exists());
    let table = ok(&["eval", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--report", "rep/offline"]);
    assert!(table.contains("WER") || table.contains("wer"));
    assert!(d.join("rep/offline.txt").exists() && d.join("rep/offline.jsonl").exists());
    ok(&["stream-eval", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--chunk-ms", "80", "--traces", "traces"]);
    let trace = std::fs::read_to_string(d.join("traces/utt000000.jsonl")).unwrap();
    assert!(trace.lines().next().unwrap().contains("\"READ\""));
    let sweep = ok(&["sweep-tau", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--report", "tau"]);
    assert!(sweep.contains("4.0") || sweep.contains("4.00"));
    assert_eq!(std::fs::read_to_string(d.join("tau.jsonl")).unwrap().lines().count(), 9);
    ok(&["sweep-chunk", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--chunks", "1,2,100"]);
    ok(&["average-ckpt", "--out", "avg.ckpt", "run/averaged.ckpt", "run/last.ckpt"]);
    ok(&["inspect-alignment", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--lambda", "1.4", "--count", "1"]);

    // Config problems exit 2, missing files 1.
    let (code, _, _) = cli(&["train", "--train", "train.jsonl", "--dev", "dev.jsonl", "--out", "x", "--lr", "-1"], d);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["train", "--config", "run.toml", "--train", "train.jsonl", "--dev", "dev.jsonl", "--out", "x", "--lr", "-1"], d);
    assert_eq!(code, 2);
    let (code, _, err) = cli(&["eval", "--ckpt", "missing.ckpt", "--data", "dev.jsonl"], d);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = cli(&["stream-eval", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl"], d);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["sweep-tau", "--ckpt", "run/averaged.ckpt", "--data", "dev.jsonl", "--metric", "ter"], d);
    assert_eq!(code, 2);
}
