use limo_chem::synth::{random_molecule, SynthParams};
use limo_chem::{diversity, fingerprint, tanimoto, Fingerprint, DEFAULT_NBITS, DEFAULT_RADIUS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..256, 0..64)
}

proptest! {
    #[test]
    fn tanimoto_is_symmetric_reflexive_and_bounded(a in bits(), b in bits()) {
        let fa = Fingerprint::from_bits(256, a).unwrap();
        let fb = Fingerprint::from_bits(256, b).unwrap();
        let ab = tanimoto(&fa, &fb).unwrap();
        let ba = tanimoto(&fb, &fa).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
    }

    #[test]
    fn molecule_fingerprints_ignore_atom_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_molecule(&mut rng, &SynthParams::wild());
        let n = g.atom_count();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let h = g.permuted(&perm);
        prop_assert_eq!(
            fingerprint(&g, DEFAULT_RADIUS, DEFAULT_NBITS).unwrap(),
            fingerprint(&h, DEFAULT_RADIUS, DEFAULT_NBITS).unwrap()
        );
    }
}

#[test]
fn diversity_of_random_molecules_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graphs: Vec<_> = (0..10)
        .map(|_| random_molecule(&mut rng, &SynthParams::druglike()))
        .collect();
    let d = diversity(&graphs).unwrap();
    assert!((0.0..=1.0).contains(&d), "{d}");
}
