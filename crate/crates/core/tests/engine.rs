use std::collections::HashSet;

use aded_core::bench::{MarkovSource, SyntheticSpec};
use aded_core::corpus::TrigramCounts;
use aded_core::engine::{collect_metrics, decode, decode_with, SessionConfig, Strategy, VerifyMode};
use aded_core::target::ScriptedModel;
use aded_core::{OracleModel, OracleModelSpec, TargetModel, TokenId, TrigramMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> (MarkovSource, TrigramMatrix, OracleModel) {
    let src = MarkovSource::new(SyntheticSpec { vocab: 50, branching: 3, docs: 60, doc_len: 80, ..Default::default() });
    let docs = src.documents(4);
    let matrix = TrigramMatrix::finalize(&TrigramCounts::from_documents(&docs), 1).unwrap();
    let oracle = OracleModel::build(OracleModelSpec::new(3), &docs);
    (src, matrix, oracle)
}

/// Plain autoregressive greedy decoding straight from the target.
fn reference(prompt: &[TokenId], target: &dyn TargetModel, n: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let d = target.next_distribution(&seq).unwrap();
        seq.push(d.argmax().unwrap());
    }
    seq[prompt.len()..].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn greedy_verification_is_lossless(
        prompt in prop::collection::vec(0u32..50, 1..10),
        budget in 1usize..40,
        iterations in 1usize..120,
        depth in 1usize..6,
        adaptive in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (_, matrix, oracle) = fixture();
        let prompt: Vec<TokenId> = prompt.into_iter().map(TokenId).collect();
        let mut cfg = SessionConfig { max_new_tokens: budget, adaptive, seed, ..SessionConfig::default() };
        cfg.search.iterations = iterations;
        cfg.search.depth = depth;
        let out = decode(&prompt, &matrix, &oracle, &cfg).unwrap();
        prop_assert_eq!(&out.tokens, &reference(&prompt, &oracle, budget));
        prop_assert_eq!(out.tokens.len(), budget);
        prop_assert_eq!(out.metrics.emitted, budget);
        prop_assert_eq!(out.metrics.accept_lengths.iter().sum::<usize>(), budget);
        prop_assert_eq!(out.metrics.accept_lengths.len(), out.metrics.forward_passes);
        prop_assert!(out.metrics.accept_lengths.iter().all(|&a| a >= 1 && a <= depth + 1));
    }
}

#[test]
fn decoding_is_deterministic_and_leaves_the_matrix_alone() {
    let (src, matrix, oracle) = fixture();
    let snapshot = matrix.to_bytes();
    let prompt = src.sample_sequence(6, &mut ChaCha8Rng::seed_from_u64(1));
    let cfg = SessionConfig { max_new_tokens: 30, verify: VerifyMode::Sampled { temperature: 0.9, top_p: 0.95 }, ..SessionConfig::default() };
    let a = decode(&prompt, &matrix, &oracle, &cfg).unwrap();
    let b = decode(&prompt, &matrix, &oracle, &cfg).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.metrics.accept_lengths, b.metrics.accept_lengths);
    assert_eq!(matrix.to_bytes(), snapshot);
    assert!(a.adapted.is_some());
    let off = decode(&prompt, &matrix, &oracle, &SessionConfig { adaptive: false, ..cfg }).unwrap();
    assert!(off.adapted.is_none());
}

#[test]
fn stop_token_ends_the_session_and_is_emitted() {
    let t = TokenId;
    let target = ScriptedModel::new().emits(t(1), t(2)).emits(t(2), t(3)).emits(t(3), t(9)).emits(t(9), t(1));
    let counts = {
        let mut c = TrigramCounts::new();
        c.add_document(&[t(1), t(2), t(3), t(9), t(1), t(2), t(3)]);
        c
    };
    let matrix = TrigramMatrix::finalize(&counts, 1).unwrap();
    let cfg = SessionConfig { max_new_tokens: 50, stop_tokens: HashSet::from([t(9)]), ..SessionConfig::default() };
    let mut steps = Vec::new();
    let out = decode_with(&[t(0), t(1)], &matrix, &target, &cfg, |s| steps.push(s.to_vec())).unwrap();
    assert_eq!(out.tokens, vec![t(2), t(3), t(9)]);
    assert_eq!(steps.concat(), out.tokens);
    assert_eq!(out.metrics.emitted, 3);
}

#[test]
fn metrics_summary_is_wired() {
    let (src, matrix, oracle) = fixture();
    let prompt = src.sample_sequence(5, &mut ChaCha8Rng::seed_from_u64(8));
    for strategy in [Strategy::Aded, Strategy::GreedyDraft, Strategy::Autoregressive] {
        let cfg = SessionConfig { strategy, max_new_tokens: 33, ..SessionConfig::default() };
        let out = decode(&prompt, &matrix, &oracle, &cfg).unwrap();
        let s = collect_metrics(&out.metrics, None, false);
        assert!((s.emitted_tokens as f64 / s.forward_passes as f64 - s.accept_length_avg).abs() < 1e-9);
        assert!(s.wall_clock_ms.is_none());
        if strategy == Strategy::Autoregressive {
            assert_eq!(s.accept_length_avg, 1.0);
            assert_eq!(s.speedup, 1.0);
        }
        let timed = collect_metrics(&out.metrics, Some(&out.metrics), true);
        assert!(timed.wall_clock_ms.is_some());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (_, matrix, oracle) = fixture();
    let prompt = [TokenId(1), TokenId(2)];
    for cfg in [
        SessionConfig { max_new_tokens: 0, ..SessionConfig::default() },
        SessionConfig { verify: VerifyMode::Sampled { temperature: 1.0, top_p: 0.0 }, ..SessionConfig::default() },
    ] {
        assert!(decode(&prompt, &matrix, &oracle, &cfg).is_err());
    }
    let mut cfg = SessionConfig::default();
    cfg.adjust.increment = 2.0;
    assert!(decode(&prompt, &matrix, &oracle, &cfg).is_err());
}
