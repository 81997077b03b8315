use std::sync::Arc;

use limo::oracles::{
    CachedOracle, Direction, ExternalConfig, ExternalOracle, OracleCache, PropertyOracle, Surrogate,
};
use limo_chem::synth::{random_molecule, SynthParams};
use limo_chem::MolGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ECHO: &str = env!("CARGO_BIN_EXE_limo-echo-oracle");

fn echo(args: &[&str]) -> ExternalOracle {
    let mut command = vec![ECHO.to_string()];
    command.extend(args.iter().map(|s| s.to_string()));
    let mut cfg = ExternalConfig::new("echo", command);
    cfg.timeout_secs = 5.0;
    ExternalOracle::new(cfg).unwrap()
}

fn molecules(count: usize, seed: u64) -> Vec<MolGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SynthParams::druglike();
    (0..count)
        .map(|_| random_molecule(&mut rng, &params))
        .collect()
}

#[test]
fn heavy_atom_scores_match_atom_counts() {
    let mols = molecules(1000, 1);
    let scores = echo(&["--mode", "heavy-atoms"]).score_batch(&mols).unwrap();
    assert_eq!(scores.len(), mols.len());
    for (g, s) in mols.iter().zip(scores) {
        assert_eq!(s.unwrap(), g.atom_count() as f64);
    }
}

#[test]
fn negative_tenth_mode_agrees_with_mock_affinity() {
    let mols = molecules(200, 2);
    let scores = echo(&["--mode", "neg-heavy-tenth"])
        .score_batch(&mols)
        .unwrap();
    for (g, s) in mols.iter().zip(scores) {
        assert_eq!(s.unwrap(), Surrogate::MockAffinity.evaluate(g));
    }
}

#[test]
fn out_of_order_responses_are_reassembled() {
    let mols = molecules(37, 3);
    let expected: Vec<f64> = mols.iter().map(|g| g.atom_count() as f64).collect();
    for in_flight in [1, 4, 8] {
        let mut cfg = ExternalConfig::new(
            "echo",
            vec![ECHO.into(), "--shuffle".into(), in_flight.to_string()],
        );
        cfg.in_flight = in_flight;
        let scores = ExternalOracle::new(cfg)
            .unwrap()
            .score_batch(&mols)
            .unwrap();
        let got: Vec<f64> = scores.into_iter().map(|s| s.unwrap()).collect();
        assert_eq!(got, expected, "in_flight {in_flight}");
    }
}

#[test]
fn one_missing_id_marks_only_that_item() {
    let mols = molecules(10, 4);
    let scores = echo(&["--drop-id", "6"]).score_batch(&mols).unwrap();
    for (i, s) in scores.iter().enumerate() {
        if i == 6 {
            assert!(s.is_err());
        } else {
            assert_eq!(*s.as_ref().unwrap(), mols[i].atom_count() as f64);
        }
    }
    // Alone in a batch the same molecule is request 0.
    assert!(echo(&["--drop-id", "6"]).score(&mols[6]).is_ok());
}

#[test]
fn slow_items_time_out_per_item() {
    let mut cfg = ExternalConfig::new(
        "echo",
        vec![ECHO.into(), "--delay-ms".into(), "1500".into()],
    );
    cfg.timeout_secs = 0.2;
    cfg.in_flight = 2;
    let scores = ExternalOracle::new(cfg)
        .unwrap()
        .score_batch(&molecules(2, 5))
        .unwrap();
    assert!(scores
        .iter()
        .all(|s| s.as_ref().unwrap_err().contains("timed out")));
}

#[test]
fn missing_program_is_a_batch_error() {
    let cfg = ExternalConfig::new("ghost", vec!["/nonexistent/oracle".into()]);
    assert!(ExternalOracle::new(cfg)
        .unwrap()
        .score_batch(&molecules(1, 6))
        .is_err());
}

#[test]
fn cache_answers_repeats_without_the_process() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.cache");
    let mols = molecules(20, 7);
    let first = {
        let cache = Arc::new(OracleCache::open(&path).unwrap());
        CachedOracle::new(echo(&[]), cache)
            .score_batch(&mols)
            .unwrap()
    };
    // Same oracle name, unusable command: every item must come from the cache.
    let mut cfg = ExternalConfig::new("echo", vec!["/nonexistent/oracle".into()]);
    cfg.direction = Direction::Minimize;
    let cache = Arc::new(OracleCache::open(&path).unwrap());
    let cached = CachedOracle::new(ExternalOracle::new(cfg).unwrap(), cache);
    let second = cached.score_batch(&mols).unwrap();
    assert_eq!(first, second);
}
