use proptest::prelude::*;
use taed::data::{generate, load, load_vocab, reverse_windows, save, save_vocab, vocab_symbols, SynthTaskConfig};
use taed::model::ModelConfig;
use taed::Error;

#[test]
fn frame_to_token_ratio_matches_mean_duration() {
    let task = SynthTaskConfig::default();
    let model = ModelConfig::default();
    let ds = generate(&task, 1000, 21).unwrap();
    let frames: usize = ds.utterances.iter().map(|u| model.encoder_frames(u.features.rows())).sum();
    let tokens: usize = ds.utterances.iter().map(|u| u.target_tokens.len()).sum();
    let [lo, hi] = task.duration_range;
    let expected = (lo + hi) as f64 / 2.0 / model.downsample_factor as f64;
    let ratio = frames as f64 / tokens as f64;
    assert!((ratio / expected - 1.0).abs() < 0.05, "T'/U = {ratio}, expected {expected}");
}

#[test]
fn targets_follow_the_transform() {
    let task = SynthTaskConfig {
        reorder_window: 2,
        ..Default::default()
    };
    assert_eq!(reverse_windows(&['a', 'b', 'c', 'd'], 2), vec!['b', 'a', 'd', 'c']);
    for u in generate(&task, 50, 4).unwrap().utterances {
        assert_eq!(u.target_tokens, reverse_windows(&u.source_tokens, 2));
        assert!(u.source_tokens.iter().all(|&t| (1..task.vocab_size).contains(&t)));
        assert!(u.source_tokens.windows(2).all(|w| w[0] != w[1]));
        let [lo, hi] = task.utterance_length_range;
        assert!((lo..=hi).contains(&u.source_tokens.len()));
    }
}

#[test]
fn noiseless_task_is_invertible_by_nearest_embedding() {
    let task = SynthTaskConfig {
        noise_std: 0.0,
        duration_range: [1, 1],
        ..Default::default()
    };
    let table = task.embeddings();
    for u in generate(&task, 20, 1).unwrap().utterances {
        let decoded: Vec<usize> = (0..u.features.rows())
            .map(|t| {
                let row = u.features.row(t);
                (0..table.len())
                    .map(|k| (k, table[k].iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0
            })
            .collect();
        assert_eq!(decoded, u.source_tokens);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let ds = generate(&SynthTaskConfig::default(), 10, 5).unwrap();
    save(&ds, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ds);

    let vocab = vocab_symbols(32);
    save_vocab(&vocab, &dir.path().join("vocab.txt")).unwrap();
    assert_eq!(load_vocab(&dir.path().join("vocab.txt")).unwrap(), vocab);
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save(&generate(&SynthTaskConfig::default(), 4, 5).unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - text.lines().last().unwrap().len() / 2 - 1;
    std::fs::write(&path, &text[..cut]).unwrap();
    assert!(matches!(load(&path), Err(Error::Format { .. })));

    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(&path, lines[..3].join("\n")).unwrap();
    assert!(matches!(load(&path), Err(Error::Format { .. })));
}

#[test]
fn version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save(&generate(&SynthTaskConfig::default(), 2, 5).unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load(&path), Err(Error::Version { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reversal_is_an_involution(tokens in prop::collection::vec(0usize..50, 0..30), w in 0usize..7) {
        prop_assert_eq!(reverse_windows(&reverse_windows(&tokens, w), w), tokens);
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let task = SynthTaskConfig::default();
        prop_assert_eq!(generate(&task, 3, seed).unwrap(), generate(&task, 3, seed).unwrap());
    }
}
