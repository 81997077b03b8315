//! Random molecule generator used for synthetic corpora and fuzzing.

use rand::Rng;

use crate::graph::{Element, MolGraph};

/// Knobs for [`random_molecule`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Chance that a growth step attaches a whole 5- or 6-ring.
    pub ring_prob: f64,
    /// Chance that a grown 6-ring carries alternating double bonds.
    pub conjugated_prob: f64,
    /// Chance that an attached atom uses a double (or triple) bond.
    pub multi_bond_prob: f64,
    /// Expected number of extra single bonds closing arbitrary rings.
    pub extra_bonds: f64,
}

impl SynthParams {
    /// Drug-like skeletons: 5/6-rings, chains, few heteroatoms.
    pub fn druglike() -> Self {
        SynthParams {
            min_atoms: 8,
            max_atoms: 26,
            ring_prob: 0.18,
            conjugated_prob: 0.5,
            multi_bond_prob: 0.12,
            extra_bonds: 0.0,
        }
    }

    /// Wider distribution with arbitrary ring closures, for fuzzing.
    pub fn wild() -> Self {
        SynthParams {
            min_atoms: 1,
            max_atoms: 30,
            ring_prob: 0.2,
            conjugated_prob: 0.5,
            multi_bond_prob: 0.2,
            extra_bonds: 1.5,
        }
    }
}

const ELEMENT_WEIGHTS: [(Element, u32); 8] = [
    (Element::C, 62),
    (Element::N, 12),
    (Element::O, 12),
    (Element::F, 3),
    (Element::S, 4),
    (Element::Cl, 3),
    (Element::Br, 2),
    (Element::P, 2),
];

fn pick_element<R: Rng>(rng: &mut R) -> Element {
    let total: u32 = ELEMENT_WEIGHTS.iter().map(|(_, w)| w).sum();
    let mut x = rng.random_range(0..total);
    for (e, w) in ELEMENT_WEIGHTS {
        if x < w {
            return e;
        }
        x -= w;
    }
    Element::C
}

/// Whether a bond of `order` between the two elements can be written with
/// the bonded atom symbols of the codec in either direction.
pub fn multi_bond_allowed(a: Element, b: Element, order: u8) -> bool {
    let ok = |e: Element| match order {
        1 => true,
        2 => matches!(e, Element::C | Element::N | Element::O | Element::S),
        3 => matches!(e, Element::C | Element::N),
        _ => false,
    };
    ok(a) && ok(b)
}

struct Builder {
    graph: MolGraph,
    capacity: Vec<u8>,
}

impl Builder {
    fn add(&mut self, e: Element) -> usize {
        self.capacity.push(e.max_valence());
        self.graph.add_atom(e)
    }

    fn bond(&mut self, a: usize, b: usize, order: u8) {
        self.graph.add_bond(a, b, order);
        self.capacity[a] -= order;
        self.capacity[b] -= order;
    }

    fn open_atoms(&self, need: u8) -> Vec<usize> {
        (0..self.capacity.len())
            .filter(|&i| self.capacity[i] >= need)
            .collect()
    }

    fn ring<R: Rng>(&mut self, rng: &mut R, size: usize, conjugated: bool) -> Vec<usize> {
        let atoms: Vec<usize> = (0..size)
            .map(|i| {
                let e = if i > 0 && rng.random_bool(0.2) {
                    [Element::N, Element::O, Element::S][rng.random_range(0..3)]
                } else {
                    Element::C
                };
                self.add(e)
            })
            .collect();
        for i in 0..size {
            let (a, b) = (atoms[i], atoms[(i + 1) % size]);
            let mut order = 1;
            if conjugated && size == 6 && i % 2 == 0 {
                let (ea, eb) = (self.graph.element(a), self.graph.element(b));
                // Keep one unit of capacity on each atom for substituents/ring partner.
                if multi_bond_allowed(ea, eb, 2) && ea.max_valence() >= 3 && eb.max_valence() >= 3 {
                    order = 2;
                }
            }
            self.bond(a, b, order);
        }
        atoms
    }
}

/// Draws a random valid, connected molecule.
pub fn random_molecule<R: Rng>(rng: &mut R, params: &SynthParams) -> MolGraph {
    let target =
        rng.random_range(params.min_atoms.max(1)..=params.max_atoms.max(params.min_atoms.max(1)));
    let mut b = Builder {
        graph: MolGraph::new(),
        capacity: Vec::new(),
    };
    if target >= 5 && rng.random_bool((2.0 * params.ring_prob).clamp(0.0, 1.0)) {
        let size = if rng.random_bool(0.5) { 5 } else { 6 };
        let conj = rng.random_bool(params.conjugated_prob);
        b.ring(rng, size, conj);
    } else {
        let e = pick_element(rng);
        b.add(e);
    }

    let mut guard = 0;
    while b.graph.atom_count() < target && guard < 10 * target + 10 {
        guard += 1;
        let open = b.open_atoms(1);
        if open.is_empty() {
            break;
        }
        let anchor = open[rng.random_range(0..open.len())];
        let room = target - b.graph.atom_count();
        if room >= 5 && rng.random_bool(params.ring_prob) {
            let size = if rng.random_bool(0.5) { 5 } else { 6 };
            let conj = rng.random_bool(params.conjugated_prob);
            let ring = b.ring(rng, size, conj);
            // Ring atom 0 is always carbon and keeps at least one free valence.
            b.bond(anchor, ring[0], 1);
            continue;
        }
        let e = pick_element(rng);
        let mut order = 1;
        if rng.random_bool(params.multi_bond_prob) {
            let want = if rng.random_bool(0.2) { 3 } else { 2 };
            let anchor_e = b.graph.element(anchor);
            if b.capacity[anchor] >= want
                && e.max_valence() >= want
                && multi_bond_allowed(anchor_e, e, want)
            {
                order = want;
            }
        }
        let atom = b.add(e);
        b.bond(anchor, atom, order);
    }

    let n = b.graph.atom_count();
    if n >= 3 && params.extra_bonds > 0.0 {
        let extra = sample_count(rng, params.extra_bonds);
        for _ in 0..extra {
            let open = b.open_atoms(1);
            if open.len() < 2 {
                break;
            }
            let x = open[rng.random_range(0..open.len())];
            let y = open[rng.random_range(0..open.len())];
            if x != y && b.graph.bond_between(x, y).is_none() {
                b.bond(x, y, 1);
            }
        }
    }
    debug_assert!(b.graph.validate());
    b.graph
}

/// Small Poisson-like count with the given mean.
fn sample_count<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let limit = (-mean).exp();
    let mut k = 0;
    let mut p = rng.random::<f64>();
    while p > limit && k < 32 {
        k += 1;
        p *= rng.random::<f64>();
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_molecules_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for params in [SynthParams::druglike(), SynthParams::wild()] {
            for _ in 0..500 {
                let g = random_molecule(&mut rng, &params);
                assert!(g.validate(), "{g:?}");
            }
        }
    }

    #[test]
    fn multi_bond_table() {
        assert!(multi_bond_allowed(Element::C, Element::O, 2));
        assert!(!multi_bond_allowed(Element::C, Element::O, 3));
        assert!(!multi_bond_allowed(Element::P, Element::C, 2));
        assert!(multi_bond_allowed(Element::N, Element::C, 3));
    }
}
