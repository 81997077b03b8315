//! Canonical labeling by individualization and partition refinement.
//!
//! Atoms start colored by `(element, degree, sorted incident bond orders)`
//! and colors are refined with neighbor `(bond order, color)` multisets until
//! stable. Remaining ties are broken by individualizing each candidate of the
//! first non-singleton cell in turn; the lexicographically smallest labeled
//! graph over all leaves is the canonical form. Twin atoms and orbits of
//! automorphisms discovered along the way are pruned.

use crate::graph::MolGraph;

/// A labeled graph in canonical atom order, comparable as a whole.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Certificate {
    atoms: Vec<u8>,
    bonds: Vec<(usize, usize, u8)>,
}

/// Canonical relabeling: `perm[old] = new`.
pub fn canonical_permutation(graph: &MolGraph) -> Vec<usize> {
    canonicalize(graph).0
}

/// String identical for isomorphic graphs and distinct otherwise.
pub fn canonical_key(graph: &MolGraph) -> String {
    let (_, cert) = canonicalize(graph);
    let mut key = String::with_capacity(cert.atoms.len() * 3 + cert.bonds.len() * 8);
    for (i, z) in cert.atoms.iter().enumerate() {
        if i > 0 {
            key.push('.');
        }
        key.push_str(element_symbol(*z));
    }
    key.push('|');
    for (i, (a, b, order)) in cert.bonds.iter().enumerate() {
        if i > 0 {
            key.push(',');
        }
        key.push_str(&format!("{a}-{b}:{order}"));
    }
    key
}

fn element_symbol(z: u8) -> &'static str {
    crate::graph::Element::ALL
        .iter()
        .find(|e| e.atomic_number() == z)
        .map(|e| e.symbol())
        .unwrap_or("?")
}

fn canonicalize(graph: &MolGraph) -> (Vec<usize>, Certificate) {
    let n = graph.atom_count();
    if n == 0 {
        return (
            Vec::new(),
            Certificate {
                atoms: Vec::new(),
                bonds: Vec::new(),
            },
        );
    }
    let adj = graph.adjacency();
    let mut order_matrix = vec![0u8; n * n];
    for b in graph.bonds() {
        order_matrix[b.a * n + b.b] = b.order;
        order_matrix[b.b * n + b.a] = b.order;
    }

    let initial: Vec<(u8, usize, Vec<u8>)> = (0..n)
        .map(|i| {
            let mut orders: Vec<u8> = adj[i].iter().map(|&(_, o)| o).collect();
            orders.sort_unstable();
            (graph.element(i).atomic_number(), adj[i].len(), orders)
        })
        .collect();
    let colors = refine(&adj, dense_ranks(&initial));

    let mut search = Search {
        graph,
        adj: &adj,
        order_matrix: &order_matrix,
        n,
        best: None,
        first_leaf: None,
        automorphisms: Vec::new(),
    };
    search.descend(colors, &mut Vec::new());
    let (perm, cert) = search.best.expect("search visits at least one leaf");
    (perm, cert)
}

/// Dense ranks of `keys` in sorted order.
fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

fn cell_count(colors: &[usize]) -> usize {
    colors.iter().copied().max().map_or(0, |m| m + 1)
}

fn refine(adj: &[Vec<(usize, u8)>], mut colors: Vec<usize>) -> Vec<usize> {
    let mut cells = cell_count(&colors);
    loop {
        let signatures: Vec<(usize, Vec<(u8, usize)>)> = (0..colors.len())
            .map(|i| {
                let mut nb: Vec<(u8, usize)> =
                    adj[i].iter().map(|&(j, o)| (o, colors[j])).collect();
                nb.sort_unstable();
                (colors[i], nb)
            })
            .collect();
        let next = dense_ranks(&signatures);
        let next_cells = cell_count(&next);
        colors = next;
        if next_cells == cells {
            return colors;
        }
        cells = next_cells;
    }
}

fn individualize(colors: &[usize], v: usize) -> Vec<usize> {
    let c = colors[v];
    colors
        .iter()
        .enumerate()
        .map(|(u, &cu)| {
            if u == v {
                c
            } else if cu >= c {
                cu + 1
            } else {
                cu
            }
        })
        .collect()
}

struct Search<'a> {
    graph: &'a MolGraph,
    adj: &'a [Vec<(usize, u8)>],
    order_matrix: &'a [u8],
    n: usize,
    best: Option<(Vec<usize>, Certificate)>,
    first_leaf: Option<(Vec<usize>, Certificate)>,
    automorphisms: Vec<Vec<usize>>,
}

impl Search<'_> {
    fn descend(&mut self, colors: Vec<usize>, path: &mut Vec<usize>) {
        if cell_count(&colors) == self.n {
            self.leaf(colors);
            return;
        }
        let target = (0..self.n)
            .map(|v| colors[v])
            .filter(|&c| colors.iter().filter(|&&x| x == c).count() > 1)
            .min()
            .expect("non-discrete partition has a non-singleton cell");
        let members: Vec<usize> = (0..self.n).filter(|&v| colors[v] == target).collect();

        let mut tried: Vec<usize> = Vec::new();
        for &v in &members {
            if tried.iter().any(|&u| self.are_twins(u, v)) {
                continue;
            }
            if !tried.is_empty() && self.same_orbit_fixing(path, &tried, v) {
                continue;
            }
            tried.push(v);
            path.push(v);
            let next = refine(self.adj, individualize(&colors, v));
            self.descend(next, path);
            path.pop();
        }
    }

    fn leaf(&mut self, colors: Vec<usize>) {
        let perm = colors;
        let cert = self.certificate(&perm);
        match &self.first_leaf {
            None => self.first_leaf = Some((perm.clone(), cert.clone())),
            Some((first_perm, first_cert)) => {
                if *first_cert == cert {
                    self.record_automorphism(first_perm.clone(), &perm);
                }
            }
        }
        match &self.best {
            Some((best_perm, best_cert)) => {
                if cert < *best_cert {
                    self.best = Some((perm, cert));
                } else if cert == *best_cert {
                    let best_perm = best_perm.clone();
                    self.record_automorphism(best_perm, &perm);
                }
            }
            None => self.best = Some((perm, cert)),
        }
    }

    /// Two leaves with equal certificates differ by an automorphism.
    fn record_automorphism(&mut self, reference: Vec<usize>, perm: &[usize]) {
        let mut inverse = vec![0; self.n];
        for (old, &new) in reference.iter().enumerate() {
            inverse[new] = old;
        }
        let gamma: Vec<usize> = perm.iter().map(|&label| inverse[label]).collect();
        if gamma.iter().enumerate().any(|(i, &g)| i != g) && !self.automorphisms.contains(&gamma) {
            self.automorphisms.push(gamma);
        }
    }

    fn certificate(&self, perm: &[usize]) -> Certificate {
        let mut atoms = vec![0u8; self.n];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.graph.element(old).atomic_number();
        }
        let mut bonds: Vec<(usize, usize, u8)> = self
            .graph
            .bonds()
            .iter()
            .map(|b| {
                let (x, y) = (perm[b.a], perm[b.b]);
                (x.min(y), x.max(y), b.order)
            })
            .collect();
        bonds.sort_unstable();
        Certificate { atoms, bonds }
    }

    /// Same element and identical bonds to every third atom.
    fn are_twins(&self, u: usize, v: usize) -> bool {
        if self.graph.element(u) != self.graph.element(v) {
            return false;
        }
        let n = self.n;
        (0..n)
            .filter(|&x| x != u && x != v)
            .all(|x| self.order_matrix[u * n + x] == self.order_matrix[v * n + x])
    }

    /// Whether `v` shares an orbit with an already tried atom under the
    /// known automorphisms that fix every individualized atom on `path`.
    fn same_orbit_fixing(&self, path: &[usize], tried: &[usize], v: usize) -> bool {
        let stabilizing: Vec<&Vec<usize>> = self
            .automorphisms
            .iter()
            .filter(|g| path.iter().all(|&p| g[p] == p))
            .collect();
        if stabilizing.is_empty() {
            return false;
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for gamma in stabilizing {
            for (i, &gi) in gamma.iter().enumerate() {
                let (a, b) = (find(&mut parent, i), find(&mut parent, gi));
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let root_v = find(&mut parent, v);
        tried.iter().any(|&u| find(&mut parent, u) == root_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Element;

    fn chain(elements: &[Element], orders: &[u8]) -> MolGraph {
        let mut g = MolGraph::new();
        for &e in elements {
            g.add_atom(e);
        }
        for (i, &o) in orders.iter().enumerate() {
            g.add_bond(i, i + 1, o);
        }
        g
    }

    #[test]
    fn bond_order_distinguishes_keys() {
        let single = chain(&[Element::C, Element::C], &[1]);
        let double = chain(&[Element::C, Element::C], &[2]);
        assert_ne!(canonical_key(&single), canonical_key(&double));
    }

    #[test]
    fn reversed_chain_has_same_key() {
        let forward = chain(&[Element::C, Element::C, Element::O], &[1, 2]);
        let backward = chain(&[Element::O, Element::C, Element::C], &[2, 1]);
        assert_eq!(canonical_key(&forward), canonical_key(&backward));
    }

    #[test]
    fn regular_graphs_with_equal_refinement_are_separated() {
        // A 6-ring and two 3-rings are both 2-regular carbon graphs; colour
        // refinement alone cannot tell them apart.
        let mut hexagon = MolGraph::new();
        for _ in 0..6 {
            hexagon.add_atom(Element::C);
        }
        for i in 0..6 {
            hexagon.add_bond(i, (i + 1) % 6, 1);
        }
        let mut triangles = MolGraph::new();
        for _ in 0..6 {
            triangles.add_atom(Element::C);
        }
        for (a, b) in [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)] {
            triangles.add_bond(a, b, 1);
        }
        assert_ne!(canonical_key(&hexagon), canonical_key(&triangles));
    }

    #[test]
    fn permutation_is_a_bijection() {
        let g = chain(
            &[Element::C, Element::N, Element::C, Element::O],
            &[1, 1, 2],
        );
        let mut perm = canonical_permutation(&g);
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2, 3]);
    }
}
