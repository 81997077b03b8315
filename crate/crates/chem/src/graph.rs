//! Hydrogen-suppressed molecular graphs and the valence model.

use std::fmt;
use std::str::FromStr;

use crate::error::ChemError;

/// Heavy-atom elements supported by the valence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    C,
    N,
    O,
    F,
    S,
    P,
    Cl,
    Br,
}

impl Element {
    pub const ALL: [Element; 8] = [
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::S,
        Element::P,
        Element::Cl,
        Element::Br,
    ];

    /// Highest total bond order the element accepts; hydrogens fill the rest implicitly.
    pub fn max_valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::F | Element::Cl | Element::Br => 1,
            Element::S => 6,
            Element::P => 5,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::S => "S",
            Element::P => "P",
            Element::Cl => "Cl",
            Element::Br => "Br",
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::S => 16,
            Element::P => 15,
            Element::Cl => 17,
            Element::Br => 35,
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = ChemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or_else(|| ChemError::UnsupportedElement(s.to_string()))
    }
}

/// An undirected bond between two atom indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: u8,
}

impl Bond {
    pub fn new(a: usize, b: usize, order: u8) -> Self {
        Bond { a, b, order }
    }

    /// The endpoint opposite `atom`, if `atom` is an endpoint.
    pub fn other(&self, atom: usize) -> Option<usize> {
        if self.a == atom {
            Some(self.b)
        } else if self.b == atom {
            Some(self.a)
        } else {
            None
        }
    }
}

/// A molecule as a graph of heavy atoms with explicit bond orders 1..=3.
///
/// The type itself does not enforce the valence model so that invalid
/// candidates can be built and rejected with [`MolGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolGraph {
    atoms: Vec<Element>,
    bonds: Vec<Bond>,
}

impl MolGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(atoms: Vec<Element>, bonds: Vec<Bond>) -> Self {
        MolGraph { atoms, bonds }
    }

    pub fn add_atom(&mut self, element: Element) -> usize {
        self.atoms.push(element);
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: u8) {
        self.bonds.push(Bond::new(a, b, order));
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn element(&self, atom: usize) -> Element {
        self.atoms[atom]
    }

    pub fn set_element(&mut self, atom: usize, element: Element) {
        self.atoms[atom] = element;
    }

    /// Per-atom list of `(neighbor, bond order)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for bond in &self.bonds {
            if bond.a < self.atoms.len() && bond.b < self.atoms.len() {
                adj[bond.a].push((bond.b, bond.order));
                adj[bond.b].push((bond.a, bond.order));
            }
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.a == atom || b.b == atom)
            .count()
    }

    /// Sum of bond orders incident to `atom`.
    pub fn bond_order_sum(&self, atom: usize) -> u32 {
        self.bonds
            .iter()
            .filter(|b| b.a == atom || b.b == atom)
            .map(|b| u32::from(b.order))
            .sum()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds
            .iter()
            .find(|bond| (bond.a == a && bond.b == b) || (bond.a == b && bond.b == a))
    }

    pub fn count_element(&self, element: Element) -> usize {
        self.atoms.iter().filter(|&&e| e == element).count()
    }

    /// Number of connected components (an empty graph has none).
    pub fn component_count(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = n;
        for bond in &self.bonds {
            if bond.a >= n || bond.b >= n {
                continue;
            }
            let (ra, rb) = (find(&mut parent, bond.a), find(&mut parent, bond.b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// True iff the graph is non-empty, connected, free of self-loops and
    /// parallel bonds, uses orders 1..=3, and every atom is within its
    /// maximum valence.
    pub fn validate(&self) -> bool {
        let n = self.atoms.len();
        if n == 0 {
            return false;
        }
        let mut used = vec![0u32; n];
        let mut seen = std::collections::HashSet::with_capacity(self.bonds.len());
        for bond in &self.bonds {
            if bond.a >= n || bond.b >= n || bond.a == bond.b {
                return false;
            }
            if !(1..=3).contains(&bond.order) {
                return false;
            }
            if !seen.insert((bond.a.min(bond.b), bond.a.max(bond.b))) {
                return false;
            }
            used[bond.a] += u32::from(bond.order);
            used[bond.b] += u32::from(bond.order);
        }
        let within_valence = self
            .atoms
            .iter()
            .zip(&used)
            .all(|(e, &u)| u <= u32::from(e.max_valence()));
        within_valence && self.is_connected()
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length mismatch");
        let mut atoms = vec![Element::C; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond::new(perm[b.a], perm[b.b], b.order))
            .collect();
        MolGraph { atoms, bonds }
    }
}
