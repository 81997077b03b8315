//! Post-optimization filtering and greedy heteroatom fine-tuning.

use limo_chem::{ring_sizes, Element, MolGraph};
use serde::{Deserialize, Serialize};

use crate::error::{LimoError, Result};
use crate::oracles::{qed_surrogate, sa_surrogate, PropertyOracle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterPolicy {
    pub qed_min: f64,
    pub sa_max: f64,
    pub ring_sizes: Vec<usize>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            qed_min: 0.4,
            sa_max: 5.5,
            ring_sizes: vec![5, 6],
        }
    }
}

impl FilterPolicy {
    /// `QED′ > qed_min`, `SA′ < sa_max` and every ring size allowed.
    pub fn admits(&self, g: &MolGraph) -> bool {
        qed_surrogate(g) > self.qed_min
            && sa_surrogate(g) < self.sa_max
            && ring_sizes(g).iter().all(|s| self.ring_sizes.contains(s))
    }
}

/// Keeps admitted molecules in their original order.
pub fn filter(mols: &[MolGraph], policy: &FilterPolicy) -> Vec<MolGraph> {
    mols.iter().filter(|g| policy.admits(g)).cloned().collect()
}

/// Replacement elements, in tie-break order.
pub const REPLACEMENTS: [Element; 4] = [Element::N, Element::O, Element::Cl, Element::F];

/// Single-atom substitutions allowed in the current graph: carbons with no
/// neighbor from [`REPLACEMENTS`], replaced by an element whose valence
/// covers the atom's existing bonds.
pub fn substitutions(g: &MolGraph) -> Vec<(usize, Element)> {
    let adjacency = g.adjacency();
    let mut out = Vec::new();
    for (i, neighbors) in adjacency.iter().enumerate() {
        if g.element(i) != Element::C {
            continue;
        }
        if neighbors
            .iter()
            .any(|&(j, _)| REPLACEMENTS.contains(&g.element(j)))
        {
            continue;
        }
        let used = g.bond_order_sum(i);
        for r in REPLACEMENTS {
            if used <= u32::from(r.max_valence()) {
                out.push((i, r));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub graph: MolGraph,
    pub score: f64,
    pub initial_score: f64,
    pub sweeps: usize,
}

/// Greedy local search: each sweep commits the single best strictly
/// improving substitution (first on ties) until none improves.
pub fn finetune(g: &MolGraph, oracle: &dyn PropertyOracle) -> Result<Finetuned> {
    let direction = oracle.direction();
    let initial_score = oracle.score(g)?;
    if !initial_score.is_finite() {
        return Err(LimoError::Oracle(format!(
            "{} scored the input {initial_score}",
            oracle.name()
        )));
    }
    let mut current = g.clone();
    let mut score = initial_score;
    let mut sweeps = 0;
    loop {
        let subs = substitutions(&current);
        if subs.is_empty() {
            break;
        }
        let candidates: Vec<MolGraph> = subs
            .iter()
            .map(|&(i, r)| {
                let mut c = current.clone();
                c.set_element(i, r);
                c
            })
            .collect();
        let scores = oracle.score_batch(&candidates)?;
        let mut best: Option<(usize, f64)> = None;
        for (k, s) in scores.into_iter().enumerate() {
            let Ok(s) = s else { continue };
            if !s.is_finite() || !direction.better(s, score) {
                continue;
            }
            if best.is_none_or(|(_, b)| direction.better(s, b)) {
                best = Some((k, s));
            }
        }
        let Some((k, s)) = best else { break };
        current = candidates.into_iter().nth(k).expect("index in range");
        score = s;
        sweeps += 1;
    }
    Ok(Finetuned {
        graph: current,
        score,
        initial_score,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{Direction, ItemScore};

    struct Counting;

    impl PropertyOracle for Counting {
        fn name(&self) -> &str {
            "nitrogen"
        }
        fn direction(&self) -> Direction {
            Direction::Maximize
        }
        fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>> {
            Ok(mols
                .iter()
                .map(|g| Ok(g.count_element(Element::N) as f64))
                .collect())
        }
    }

    #[test]
    fn single_carbon_becomes_nitrogen() {
        let mut g = MolGraph::new();
        g.add_atom(Element::C);
        let out = finetune(&g, &Counting).unwrap();
        assert_eq!(out.graph.atoms(), &[Element::N]);
        assert_eq!((out.score, out.sweeps), (1.0, 1));
    }

    #[test]
    fn heteroatom_neighbors_lock_carbons() {
        // C-C-C: all first substitutions tie, so atom 0 goes first and locks atom 1.
        let mut g = MolGraph::new();
        for _ in 0..3 {
            g.add_atom(Element::C);
        }
        g.add_bond(0, 1, 1);
        g.add_bond(1, 2, 1);
        let out = finetune(&g, &Counting).unwrap();
        assert_eq!(out.graph.atoms(), &[Element::N, Element::C, Element::N]);
    }

    #[test]
    fn valence_limits_replacements() {
        let mut g = MolGraph::new();
        let c = g.add_atom(Element::C);
        let d = g.add_atom(Element::C);
        g.add_bond(c, d, 3);
        assert_eq!(substitutions(&g), vec![(0, Element::N), (1, Element::N)]);
    }
}
