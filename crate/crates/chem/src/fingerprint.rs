//! Circular (Morgan-style) fingerprints, Tanimoto similarity and set diversity.

use crate::error::ChemError;
use crate::graph::MolGraph;
use crate::rings::ring_membership;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_NBITS: usize = 2048;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Fixed-width bitset produced by [`fingerprint`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn empty(nbits: usize, radius: usize) -> Result<Self, ChemError> {
        if nbits == 0 || !nbits.is_power_of_two() {
            return Err(ChemError::InvalidWidth(nbits));
        }
        Ok(Fingerprint {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
            radius,
        })
    }

    /// Builds a fingerprint with the given bit positions set (reduced modulo `nbits`).
    pub fn from_bits(
        nbits: usize,
        bits: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ChemError> {
        let mut fp = Fingerprint::empty(nbits, 0)?;
        for b in bits {
            fp.set(b);
        }
        Ok(fp)
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit & (self.nbits - 1);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        let bit = bit & (self.nbits - 1);
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nbits).filter(|&b| self.get(b))
    }
}

/// Circular fingerprint of `graph`.
///
/// Layer 0 hashes `(atomic number, degree, ring flag)`; each later layer
/// hashes the atom's previous identifier with its neighbors' sorted
/// `(bond order, identifier)` pairs. Every identifier of every layer sets
/// bit `hash mod nbits`.
pub fn fingerprint(
    graph: &MolGraph,
    radius: usize,
    nbits: usize,
) -> Result<Fingerprint, ChemError> {
    let mut fp = Fingerprint::empty(nbits, radius)?;
    let n = graph.atom_count();
    let adj = graph.adjacency();
    let in_ring = ring_membership(graph);

    let mut ids: Vec<u64> = (0..n)
        .map(|i| {
            fnv1a(&[
                graph.element(i).atomic_number(),
                adj[i].len() as u8,
                u8::from(in_ring[i]),
            ])
        })
        .collect();
    for &id in &ids {
        fp.set((id % nbits as u64) as usize);
    }

    let mut buf = Vec::new();
    for _ in 0..radius {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut pairs: Vec<(u8, u64)> = adj[i].iter().map(|&(j, o)| (o, ids[j])).collect();
                pairs.sort_unstable();
                buf.clear();
                buf.extend_from_slice(&ids[i].to_le_bytes());
                for (order, id) in pairs {
                    buf.push(order);
                    buf.extend_from_slice(&id.to_le_bytes());
                }
                fnv1a(&buf)
            })
            .collect();
        for &id in &next {
            fp.set((id % nbits as u64) as usize);
        }
        ids = next;
    }
    Ok(fp)
}

/// `|A ∧ B| / |A ∨ B|`, defined as 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, ChemError> {
    if a.nbits != b.nbits {
        return Err(ChemError::WidthMismatch {
            left: a.nbits,
            right: b.nbits,
        });
    }
    let (mut both, mut either) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        either += (x | y).count_ones();
    }
    if either == 0 {
        return Ok(1.0);
    }
    Ok(f64::from(both) / f64::from(either))
}

/// One minus the mean pairwise Tanimoto similarity of precomputed fingerprints.
pub fn diversity_of(fingerprints: &[Fingerprint]) -> Result<f64, ChemError> {
    let k = fingerprints.len();
    if k < 2 {
        return Err(ChemError::TooFewMolecules(k));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += tanimoto(&fingerprints[i], &fingerprints[j])?;
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(1.0 - total / pairs)
}

/// One minus the mean pairwise Tanimoto similarity, default fingerprint settings.
pub fn diversity(graphs: &[MolGraph]) -> Result<f64, ChemError> {
    if graphs.len() < 2 {
        return Err(ChemError::TooFewMolecules(graphs.len()));
    }
    let fps = graphs
        .iter()
        .map(|g| fingerprint(g, DEFAULT_RADIUS, DEFAULT_NBITS))
        .collect::<Result<Vec<_>, _>>()?;
    diversity_of(&fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Element;

    fn single(e: Element) -> MolGraph {
        let mut g = MolGraph::new();
        g.add_atom(e);
        g
    }

    #[test]
    fn radius_zero_single_atom_sets_one_bit() {
        let fp = fingerprint(&single(Element::C), 0, 2048).unwrap();
        assert_eq!(fp.count_ones(), 1);
    }

    #[test]
    fn carbon_and_oxygen_hash_to_different_bits() {
        let c = fingerprint(&single(Element::C), 0, 2048).unwrap();
        let o = fingerprint(&single(Element::O), 0, 2048).unwrap();
        let expected_c = (fnv1a(&[6, 0, 0]) % 2048) as usize;
        let expected_o = (fnv1a(&[8, 0, 0]) % 2048) as usize;
        assert_ne!(expected_c, expected_o);
        assert_eq!(c.ones().collect::<Vec<_>>(), vec![expected_c]);
        assert_eq!(o.ones().collect::<Vec<_>>(), vec![expected_o]);
    }

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn tanimoto_formula_cases() {
        let a = Fingerprint::from_bits(64, [1, 2, 3]).unwrap();
        let b = Fingerprint::from_bits(64, [2, 3, 4]).unwrap();
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let disjoint = Fingerprint::from_bits(64, [10, 11]).unwrap();
        assert_eq!(tanimoto(&a, &disjoint).unwrap(), 0.0);
        let empty = Fingerprint::empty(64, 0).unwrap();
        assert_eq!(tanimoto(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn tanimoto_rejects_width_mismatch() {
        let a = Fingerprint::empty(64, 0).unwrap();
        let b = Fingerprint::empty(128, 0).unwrap();
        assert!(matches!(
            tanimoto(&a, &b),
            Err(ChemError::WidthMismatch {
                left: 64,
                right: 128
            })
        ));
    }

    #[test]
    fn width_must_be_power_of_two() {
        assert!(fingerprint(&single(Element::C), 2, 1000).is_err());
    }

    #[test]
    fn diversity_cases() {
        let same = vec![single(Element::C), single(Element::C), single(Element::C)];
        assert_eq!(diversity(&same).unwrap(), 0.0);
        assert!(matches!(
            diversity(&same[..1]),
            Err(ChemError::TooFewMolecules(1))
        ));

        let a = Fingerprint::from_bits(64, [1, 2, 3]).unwrap();
        let b = Fingerprint::from_bits(64, [2, 3, 4]).unwrap();
        assert_eq!(diversity_of(&[a, b]).unwrap(), 0.5);
    }
}
