//! Writer for the SMILES subset used to hand molecules to external oracles.
//!
//! Output uses organic-subset element symbols, `=`/`#` bond prefixes,
//! parenthesized branches and numeric ring-closure labels. The traversal is
//! a depth-first search from the canonical root with neighbors visited in
//! canonical order, so isomorphic graphs produce the same string.

use crate::canon::canonical_permutation;
use crate::graph::MolGraph;

pub fn to_smiles(graph: &MolGraph) -> String {
    let n = graph.atom_count();
    if n == 0 {
        return String::new();
    }
    let rank = canonical_permutation(graph);
    let mut adj = graph.adjacency();
    for list in &mut adj {
        list.sort_by_key(|&(j, _)| rank[j]);
    }
    let root = (0..n).min_by_key(|&i| rank[i]).expect("non-empty graph");

    let mut plan = Plan {
        visit_index: vec![usize::MAX; n],
        children: vec![Vec::new(); n],
        ring_bonds: vec![Vec::new(); n],
        next_index: 0,
    };
    plan.dfs(&adj, root, None);

    let mut out = String::new();
    let mut labels = RingLabels::default();
    let mut open: Vec<(usize, usize, u32)> = Vec::new();
    emit(graph, &plan, root, 0, &mut out, &mut labels, &mut open);
    out
}

struct Plan {
    visit_index: Vec<usize>,
    children: Vec<Vec<(usize, u8)>>,
    /// Ring-closure partners of each atom with the bond order.
    ring_bonds: Vec<Vec<(usize, u8)>>,
    next_index: usize,
}

impl Plan {
    fn dfs(&mut self, adj: &[Vec<(usize, u8)>], atom: usize, parent: Option<usize>) {
        self.visit_index[atom] = self.next_index;
        self.next_index += 1;
        for &(next, order) in &adj[atom] {
            if Some(next) == parent {
                continue;
            }
            if self.visit_index[next] == usize::MAX {
                self.children[atom].push((next, order));
                self.dfs(adj, next, Some(atom));
            } else if self.visit_index[next] < self.visit_index[atom]
                && !self.ring_bonds[atom].iter().any(|&(p, _)| p == next)
            {
                self.ring_bonds[atom].push((next, order));
                self.ring_bonds[next].push((atom, order));
            }
        }
    }
}

#[derive(Default)]
struct RingLabels {
    in_use: Vec<bool>,
}

impl RingLabels {
    fn acquire(&mut self) -> u32 {
        match self.in_use.iter().position(|&u| !u) {
            Some(i) => {
                self.in_use[i] = true;
                i as u32 + 1
            }
            None => {
                self.in_use.push(true);
                self.in_use.len() as u32
            }
        }
    }

    fn release(&mut self, label: u32) {
        self.in_use[label as usize - 1] = false;
    }
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

fn write_label(out: &mut String, label: u32) {
    if label < 10 {
        out.push_str(&label.to_string());
    } else {
        out.push('%');
        out.push_str(&label.to_string());
    }
}

fn emit(
    graph: &MolGraph,
    plan: &Plan,
    atom: usize,
    incoming_order: u8,
    out: &mut String,
    labels: &mut RingLabels,
    open: &mut Vec<(usize, usize, u32)>,
) {
    out.push_str(bond_symbol(incoming_order));
    out.push_str(graph.element(atom).symbol());

    let mut partners = plan.ring_bonds[atom].clone();
    partners.sort_by_key(|&(p, _)| plan.visit_index[p]);
    for (partner, order) in partners {
        if let Some(pos) = open
            .iter()
            .position(|&(from, to, _)| from == partner && to == atom)
        {
            let (_, _, label) = open.remove(pos);
            write_label(out, label);
            labels.release(label);
        } else {
            let label = labels.acquire();
            out.push_str(bond_symbol(order));
            write_label(out, label);
            open.push((atom, partner, label));
        }
    }

    let children = &plan.children[atom];
    for (i, &(child, order)) in children.iter().enumerate() {
        let last = i + 1 == children.len();
        if !last {
            out.push('(');
        }
        emit(graph, plan, child, order, out, labels, open);
        if !last {
            out.push(')');
        }
    }
}
