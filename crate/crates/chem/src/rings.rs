//! Smallest set of smallest rings.
//!
//! Candidates come from Horton's construction (shortest path to each end of
//! an edge from every root), ordered by size and then by the sorted atom
//! index list, and are accepted greedily while they stay independent over
//! GF(2) in edge space.

use std::collections::{HashSet, VecDeque};

use crate::graph::MolGraph;

/// Rings of the SSSR, each as atom indices in cycle order.
pub fn sssr(graph: &MolGraph) -> Vec<Vec<usize>> {
    let n = graph.atom_count();
    let m = graph.bond_count();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let rank = m + graph.component_count();
    if rank <= n {
        return Vec::new();
    }
    let target = rank - n;

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (idx, bond) in graph.bonds().iter().enumerate() {
        adj[bond.a].push((bond.b, idx));
        adj[bond.b].push((bond.a, idx));
    }
    for list in &mut adj {
        list.sort_unstable();
    }

    let words = m.div_ceil(64);
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut candidates: Vec<Candidate> = Vec::new();

    for root in 0..n {
        let (parent, parent_edge) = bfs_tree(&adj, root);
        for (edge_idx, bond) in graph.bonds().iter().enumerate() {
            let (x, y) = (bond.a, bond.b);
            if parent[x].is_none() && x != root || parent[y].is_none() && y != root {
                continue;
            }
            let px = path_to_root(&parent, x, root);
            let py = path_to_root(&parent, y, root);
            // Paths may only share the root.
            let shared = px.iter().filter(|a| py.contains(a)).count();
            if shared != 1 {
                continue;
            }
            let mut atoms: Vec<usize> = px.iter().rev().copied().collect();
            atoms.extend(py.iter().take(py.len() - 1));
            if atoms.len() < 3 {
                continue;
            }
            let mut bits = vec![0u64; words];
            let mut edge_count = 1;
            set_bit(&mut bits, edge_idx);
            for path in [&px, &py] {
                for &atom in &path[..path.len() - 1] {
                    let e = parent_edge[atom].expect("non-root atom has a tree edge");
                    if get_bit(&bits, e) {
                        edge_count = 0;
                        break;
                    }
                    set_bit(&mut bits, e);
                    edge_count += 1;
                }
            }
            if edge_count != atoms.len() || !seen.insert(bits.clone()) {
                continue;
            }
            let mut sorted_atoms = atoms.clone();
            sorted_atoms.sort_unstable();
            candidates.push(Candidate {
                atoms,
                sorted_atoms,
                bits,
            });
        }
    }

    candidates.sort_by(|a, b| {
        a.atoms
            .len()
            .cmp(&b.atoms.len())
            .then_with(|| a.sorted_atoms.cmp(&b.sorted_atoms))
    });

    // Row-echelon basis keyed by pivot bit.
    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut rings = Vec::with_capacity(target);
    for cand in candidates {
        if rings.len() == target {
            break;
        }
        let mut v = cand.bits.clone();
        for (pivot, row) in &basis {
            if get_bit(&v, *pivot) {
                for (w, r) in v.iter_mut().zip(row) {
                    *w ^= r;
                }
            }
        }
        if let Some(pivot) = first_bit(&v) {
            basis.push((pivot, v));
            rings.push(cand.atoms);
        }
    }
    rings
}

/// Sizes of the SSSR rings, sorted ascending.
pub fn ring_sizes(graph: &MolGraph) -> Vec<usize> {
    let mut sizes: Vec<usize> = sssr(graph).iter().map(Vec::len).collect();
    sizes.sort_unstable();
    sizes
}

/// Per-atom flag: the atom belongs to at least one ring.
pub fn ring_membership(graph: &MolGraph) -> Vec<bool> {
    let mut member = vec![false; graph.atom_count()];
    for ring in sssr(graph) {
        for atom in ring {
            member[atom] = true;
        }
    }
    member
}

struct Candidate {
    atoms: Vec<usize>,
    sorted_atoms: Vec<usize>,
    bits: Vec<u64>,
}

fn bfs_tree(adj: &[Vec<(usize, usize)>], root: usize) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let n = adj.len();
    let mut parent = vec![None; n];
    let mut parent_edge = vec![None; n];
    let mut visited = vec![false; n];
    visited[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &(v, e) in &adj[u] {
            if !visited[v] {
                visited[v] = true;
                parent[v] = Some(u);
                parent_edge[v] = Some(e);
                queue.push_back(v);
            }
        }
    }
    (parent, parent_edge)
}

/// Atoms from `atom` up to and including `root`.
fn path_to_root(parent: &[Option<usize>], atom: usize, root: usize) -> Vec<usize> {
    let mut path = vec![atom];
    let mut cur = atom;
    while cur != root {
        cur = parent[cur].expect("atom reachable from root");
        path.push(cur);
    }
    path
}

fn set_bit(bits: &mut [u64], i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

fn get_bit(bits: &[u64], i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

fn first_bit(bits: &[u64]) -> Option<usize> {
    bits.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Element;

    fn ring(size: usize) -> MolGraph {
        let mut g = MolGraph::new();
        for _ in 0..size {
            g.add_atom(Element::C);
        }
        for i in 0..size {
            g.add_bond(i, (i + 1) % size, 1);
        }
        g
    }

    fn naphthalene_skeleton() -> MolGraph {
        // Two 6-rings sharing the 0-5 edge.
        let mut g = ring(6);
        for _ in 0..4 {
            g.add_atom(Element::C);
        }
        g.add_bond(5, 6, 1);
        g.add_bond(6, 7, 1);
        g.add_bond(7, 8, 1);
        g.add_bond(8, 9, 1);
        g.add_bond(9, 0, 1);
        g
    }

    /// All simple cycles by DFS from each cycle's lowest atom.
    fn all_cycles(g: &MolGraph) -> Vec<Vec<usize>> {
        let adj = g.adjacency();
        let mut out: Vec<Vec<usize>> = Vec::new();
        fn dfs(
            adj: &[Vec<(usize, u8)>],
            start: usize,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            let last = *path.last().unwrap();
            for &(next, _) in &adj[last] {
                if next == start && path.len() >= 3 {
                    // Keep one of the two directions.
                    if path[1] < *path.last().unwrap() {
                        out.push(path.clone());
                    }
                } else if next > start && !path.contains(&next) {
                    path.push(next);
                    dfs(adj, start, path, out);
                    path.pop();
                }
            }
        }
        for start in 0..g.atom_count() {
            dfs(&adj, start, &mut vec![start], &mut out);
        }
        out
    }

    fn edge_set(cycle: &[usize]) -> HashSet<(usize, usize)> {
        (0..cycle.len())
            .map(|i| {
                let (a, b) = (cycle[i], cycle[(i + 1) % cycle.len()]);
                (a.min(b), a.max(b))
            })
            .collect()
    }

    #[test]
    fn acyclic_chain_has_no_rings() {
        let mut g = MolGraph::new();
        for i in 0..5 {
            g.add_atom(Element::C);
            if i > 0 {
                g.add_bond(i - 1, i, 1);
            }
        }
        assert!(ring_sizes(&g).is_empty());
    }

    #[test]
    fn single_six_ring() {
        assert_eq!(ring_sizes(&ring(6)), vec![6]);
    }

    #[test]
    fn fused_bicycle_matches_brute_force() {
        let g = naphthalene_skeleton();
        assert_eq!(g.atom_count(), 10);
        assert_eq!(g.bond_count(), 11);

        // Oracle: enumerate every simple cycle, then pick the lightest pair
        // whose edge sets are GF(2)-independent (distinct, non-empty xor).
        let cycles = all_cycles(&g);
        assert_eq!(cycles.len(), 3);
        let mut best: Option<(usize, Vec<usize>)> = None;
        for i in 0..cycles.len() {
            for j in i + 1..cycles.len() {
                let (a, b) = (edge_set(&cycles[i]), edge_set(&cycles[j]));
                if a == b {
                    continue;
                }
                let weight = cycles[i].len() + cycles[j].len();
                let mut sizes = vec![cycles[i].len(), cycles[j].len()];
                sizes.sort_unstable();
                if best.as_ref().is_none_or(|(w, _)| weight < *w) {
                    best = Some((weight, sizes));
                }
            }
        }
        assert_eq!(best.unwrap().1, vec![6, 6]);
        assert_eq!(ring_sizes(&g), vec![6, 6]);
    }

    #[test]
    fn cubane_ring_count_follows_cyclomatic_number() {
        let mut g = MolGraph::new();
        for _ in 0..8 {
            g.add_atom(Element::C);
        }
        let edges = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 0),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 4),
            (0, 4),
            (1, 5),
            (2, 6),
            (3, 7),
        ];
        for (a, b) in edges {
            g.add_bond(a, b, 1);
        }
        assert_eq!(ring_sizes(&g), vec![4, 4, 4, 4, 4]);
    }

    #[test]
    fn membership_excludes_substituents() {
        let mut g = ring(5);
        let tail = g.add_atom(Element::O);
        g.add_bond(0, tail, 1);
        let member = ring_membership(&g);
        assert_eq!(member, vec![true, true, true, true, true, false]);
    }
}
