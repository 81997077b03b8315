//! A restricted SELFIES dialect.
//!
//! Every symbol string derives a valence-valid molecule: the decoder is a
//! state machine that tracks the current atom and each atom's remaining
//! valence capacity, clipping bond orders and skipping whatever cannot be
//! satisfied. The encoder walks a spanning tree from the canonical root atom
//! and is the decoder's inverse up to isomorphism.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canon::canonical_permutation;
use crate::error::ChemError;
use crate::graph::{Element, MolGraph};

/// Default fixed string length.
pub const DEFAULT_LENGTH: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// An atom bonded to the current atom with the requested order.
    Atom {
        element: Element,
        order: u8,
    },
    /// Opens a branch whose length is read from 1 or 2 index symbols.
    Branch(u8),
    /// Ring closure whose offset is read from 1 or 2 index symbols.
    Ring(u8),
    Nop,
}

impl Symbol {
    fn atom(element: Element, order: u8) -> Self {
        Symbol::Atom { element, order }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Atom { element, order } => {
                let prefix = match order {
                    2 => "=",
                    3 => "#",
                    _ => "",
                };
                write!(f, "[{prefix}{element}]")
            }
            Symbol::Branch(k) => write!(f, "[Branch{k}]"),
            Symbol::Ring(k) => write!(f, "[Ring{k}]"),
            Symbol::Nop => f.write_str("[nop]"),
        }
    }
}

/// The symbol set `S = (s_1..s_d)` with the 16-entry payload index table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<Symbol>,
    /// `index_table[digit]` is a symbol id.
    index_table: Vec<u8>,
    /// Digit value of every symbol id; symbols outside the table read as 0.
    digit_of: Vec<u8>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::standard()
    }
}

impl Alphabet {
    pub fn standard() -> Self {
        use Element::*;
        let symbols = vec![
            Symbol::atom(C, 1),
            Symbol::atom(N, 1),
            Symbol::atom(O, 1),
            Symbol::atom(F, 1),
            Symbol::atom(S, 1),
            Symbol::atom(P, 1),
            Symbol::atom(Cl, 1),
            Symbol::atom(Br, 1),
            Symbol::atom(C, 2),
            Symbol::atom(C, 3),
            Symbol::atom(N, 2),
            Symbol::atom(N, 3),
            Symbol::atom(O, 2),
            Symbol::atom(S, 2),
            Symbol::Branch(1),
            Symbol::Branch(2),
            Symbol::Ring(1),
            Symbol::Ring(2),
            Symbol::Nop,
        ];
        let table = [
            Symbol::atom(C, 1),
            Symbol::Ring(1),
            Symbol::Ring(2),
            Symbol::Branch(1),
            Symbol::Branch(2),
            Symbol::atom(O, 1),
            Symbol::atom(N, 1),
            Symbol::atom(N, 2),
            Symbol::atom(C, 2),
            Symbol::atom(C, 3),
            Symbol::atom(S, 1),
            Symbol::atom(P, 1),
            Symbol::atom(F, 1),
            Symbol::atom(O, 2),
            Symbol::atom(Cl, 1),
            Symbol::atom(Br, 1),
        ];
        let index_table: Vec<u8> = table
            .iter()
            .map(|s| {
                symbols
                    .iter()
                    .position(|x| x == s)
                    .expect("table symbol in alphabet") as u8
            })
            .collect();
        let mut digit_of = vec![0u8; symbols.len()];
        for (digit, &id) in index_table.iter().enumerate() {
            digit_of[id as usize] = digit as u8;
        }
        Alphabet {
            symbols,
            index_table,
            digit_of,
        }
    }

    /// Number of symbols `d`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: u8) -> Symbol {
        self.symbols[id as usize]
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn id_of(&self, symbol: Symbol) -> Option<u8> {
        self.symbols
            .iter()
            .position(|&s| s == symbol)
            .map(|i| i as u8)
    }

    pub fn nop(&self) -> u8 {
        self.id_of(Symbol::Nop).expect("alphabet has [nop]")
    }

    pub fn index_table(&self) -> &[u8] {
        &self.index_table
    }

    pub fn digit(&self, id: u8) -> usize {
        usize::from(self.digit_of[id as usize])
    }

    fn index_symbol(&self, digit: usize) -> u8 {
        self.index_table[digit]
    }

    pub fn parse_symbol(&self, token: &str) -> Result<u8, ChemError> {
        self.symbols
            .iter()
            .position(|s| s.to_string() == token)
            .map(|i| i as u8)
            .ok_or_else(|| ChemError::UnknownSymbol(token.to_string()))
    }
}

/// A fixed-length string of symbol ids, padded with `[nop]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelfiesString {
    ids: Vec<u8>,
}

impl SelfiesString {
    /// Wraps raw ids; every id must be below the alphabet size.
    pub fn from_ids(ids: Vec<u8>, alphabet: &Alphabet) -> Result<Self, ChemError> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= alphabet.len()) {
            return Err(ChemError::Malformed(format!(
                "symbol id {bad} out of range"
            )));
        }
        Ok(SelfiesString { ids })
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Bracketed text with trailing padding stripped.
    pub fn to_text(&self, alphabet: &Alphabet) -> String {
        let nop = alphabet.nop();
        let end = self
            .ids
            .iter()
            .rposition(|&id| id != nop)
            .map_or(0, |p| p + 1);
        self.ids[..end]
            .iter()
            .map(|&id| alphabet.symbol(id).to_string())
            .collect()
    }

    /// Parses bracketed text and pads it to `n` symbols.
    pub fn parse(text: &str, n: usize, alphabet: &Alphabet) -> Result<Self, ChemError> {
        let text = text.trim();
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            if !rest.starts_with('[') {
                return Err(ChemError::Malformed(format!("expected `[` in `{text}`")));
            }
            let close = rest
                .find(']')
                .ok_or_else(|| ChemError::Malformed(format!("unclosed symbol in `{text}`")))?;
            ids.push(alphabet.parse_symbol(&rest[..=close])?);
            rest = &rest[close + 1..];
        }
        if ids.len() > n {
            return Err(ChemError::TooLong {
                required: ids.len(),
                limit: n,
            });
        }
        ids.resize(n, alphabet.nop());
        Ok(SelfiesString { ids })
    }
}

/// Uniform i.i.d. symbols, deterministic per seed.
pub fn random_string(seed: u64, n: usize, alphabet: &Alphabet) -> SelfiesString {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n)
        .map(|_| rng.random_range(0..alphabet.len()) as u8)
        .collect();
    SelfiesString { ids }
}

/// Derives the molecule of a symbol string. Total: never fails and the
/// result always passes [`MolGraph::validate`].
pub fn decode(s: &SelfiesString, alphabet: &Alphabet) -> MolGraph {
    decode_ids(s.ids(), alphabet)
}

pub fn decode_ids(ids: &[u8], alphabet: &Alphabet) -> MolGraph {
    let mut d = Deriver {
        ids,
        alphabet,
        graph: MolGraph::new(),
        capacity: Vec::new(),
    };
    d.derive(0, ids.len(), None);
    if d.graph.atom_count() == 0 {
        d.graph.add_atom(Element::C);
    }
    d.graph
}

struct Deriver<'a> {
    ids: &'a [u8],
    alphabet: &'a Alphabet,
    graph: MolGraph,
    capacity: Vec<u8>,
}

impl Deriver<'_> {
    /// Derives `ids[start..end]` with `current` as the attachment point.
    fn derive(&mut self, start: usize, end: usize, mut current: Option<usize>) {
        let mut pos = start;
        while pos < end {
            let symbol = self.alphabet.symbol(self.ids[pos]);
            pos += 1;
            match symbol {
                Symbol::Nop => {}
                Symbol::Atom { element, order } => match current {
                    None if self.graph.atom_count() == 0 => {
                        current = Some(self.place(element));
                    }
                    None => return,
                    Some(cur) => {
                        if self.capacity[cur] == 0 {
                            return;
                        }
                        let effective = order.min(self.capacity[cur]).min(element.max_valence());
                        let atom = self.place(element);
                        self.graph.add_bond(cur, atom, effective);
                        self.capacity[cur] -= effective;
                        self.capacity[atom] -= effective;
                        current = Some(atom);
                    }
                },
                Symbol::Branch(digits) => {
                    let Some(q) = self.read_payload(pos, end, digits) else {
                        return;
                    };
                    pos += usize::from(digits);
                    let body_end = (pos + q + 1).min(end);
                    if let Some(cur) = current {
                        if self.capacity[cur] > 1 {
                            self.derive(pos, body_end, Some(cur));
                        }
                    }
                    pos = body_end;
                }
                Symbol::Ring(digits) => {
                    let Some(q) = self.read_payload(pos, end, digits) else {
                        return;
                    };
                    pos += usize::from(digits);
                    if let Some(cur) = current {
                        let target = cur.saturating_sub(q + 1);
                        self.try_ring_bond(cur, target);
                    }
                }
            }
        }
    }

    fn place(&mut self, element: Element) -> usize {
        self.capacity.push(element.max_valence());
        self.graph.add_atom(element)
    }

    fn read_payload(&self, pos: usize, end: usize, digits: u8) -> Option<usize> {
        let digits = usize::from(digits);
        if pos + digits > end {
            return None;
        }
        Some(
            self.ids[pos..pos + digits]
                .iter()
                .fold(0, |q, &id| q * 16 + self.alphabet.digit(id)),
        )
    }

    fn try_ring_bond(&mut self, cur: usize, target: usize) {
        if target == cur
            || self.graph.bond_between(cur, target).is_some()
            || self.capacity[cur] == 0
            || self.capacity[target] == 0
        {
            return;
        }
        self.graph.add_bond(cur, target, 1);
        self.capacity[cur] -= 1;
        self.capacity[target] -= 1;
    }
}

/// Encodes a valid connected molecule into a string of exactly `n` symbols.
pub fn encode(graph: &MolGraph, n: usize, alphabet: &Alphabet) -> Result<SelfiesString, ChemError> {
    let mut ids = encode_unpadded(graph, alphabet)?;
    if ids.len() > n {
        return Err(ChemError::TooLong {
            required: ids.len(),
            limit: n,
        });
    }
    ids.resize(n, alphabet.nop());
    Ok(SelfiesString { ids })
}

/// Encoding without padding; its length is the minimum usable `n`.
pub fn encode_unpadded(graph: &MolGraph, alphabet: &Alphabet) -> Result<Vec<u8>, ChemError> {
    if !graph.validate() {
        return Err(ChemError::InvalidGraph(
            "failed valence/connectivity validation".into(),
        ));
    }
    let perm = canonical_permutation(graph);
    let g = graph.permuted(&perm);
    let tree = SpanningTree::build(&g);
    let mut emitter = Emitter {
        graph: &g,
        alphabet,
        tree: &tree,
        derivation: vec![usize::MAX; g.atom_count()],
        counter: 0,
    };
    let mut out = Vec::new();
    emitter.emit(0, 1, &mut out)?;
    Ok(out)
}

/// Tree edges chosen so that every multiple bond is a tree edge; ring
/// closures in this dialect are always single bonds.
struct SpanningTree {
    children: Vec<Vec<(usize, u8)>>,
    /// Non-tree neighbors of each atom.
    closures: Vec<Vec<usize>>,
}

impl SpanningTree {
    fn build(g: &MolGraph) -> Self {
        let n = g.atom_count();
        let mut adj = g.adjacency();
        for list in &mut adj {
            list.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        }
        let dfs = Self::dfs_tree(g, &adj);
        let in_tree = if Self::closures_single(g, &dfs) {
            dfs
        } else {
            Self::max_order_tree(g)
        };

        let mut tree_adj: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
        let mut closures = vec![Vec::new(); n];
        for (idx, b) in g.bonds().iter().enumerate() {
            if in_tree[idx] {
                tree_adj[b.a].push((b.b, b.order));
                tree_adj[b.b].push((b.a, b.order));
            } else {
                closures[b.a].push(b.b);
                closures[b.b].push(b.a);
            }
        }
        let mut children = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            let mut kids: Vec<(usize, u8)> = tree_adj[u]
                .iter()
                .copied()
                .filter(|&(v, _)| !seen[v])
                .collect();
            kids.sort_unstable();
            for &(v, _) in &kids {
                seen[v] = true;
                stack.push(v);
            }
            children[u] = kids;
        }
        SpanningTree { children, closures }
    }

    fn dfs_tree(g: &MolGraph, adj: &[Vec<(usize, u8)>]) -> Vec<bool> {
        fn walk(
            u: usize,
            adj: &[Vec<(usize, u8)>],
            seen: &mut [bool],
            pairs: &mut HashSet<(usize, usize)>,
        ) {
            seen[u] = true;
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    pairs.insert((u.min(v), u.max(v)));
                    walk(v, adj, seen, pairs);
                }
            }
        }
        let mut pairs = HashSet::new();
        let mut seen = vec![false; g.atom_count()];
        walk(0, adj, &mut seen, &mut pairs);
        g.bonds()
            .iter()
            .map(|b| pairs.contains(&(b.a.min(b.b), b.a.max(b.b))))
            .collect()
    }

    fn closures_single(g: &MolGraph, in_tree: &[bool]) -> bool {
        g.bonds()
            .iter()
            .zip(in_tree)
            .all(|(b, &t)| t || b.order == 1)
    }

    /// Kruskal over bonds ordered by descending order, then atom indices.
    fn max_order_tree(g: &MolGraph) -> Vec<bool> {
        let n = g.atom_count();
        let mut order: Vec<usize> = (0..g.bond_count()).collect();
        order.sort_by_key(|&i| {
            let b = g.bonds()[i];
            (std::cmp::Reverse(b.order), b.a.min(b.b), b.a.max(b.b))
        });
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut in_tree = vec![false; g.bond_count()];
        for i in order {
            let b = g.bonds()[i];
            let (ra, rb) = (find(&mut parent, b.a), find(&mut parent, b.b));
            if ra != rb {
                parent[ra] = rb;
                in_tree[i] = true;
            }
        }
        in_tree
    }
}

struct Emitter<'a> {
    graph: &'a MolGraph,
    alphabet: &'a Alphabet,
    tree: &'a SpanningTree,
    derivation: Vec<usize>,
    counter: usize,
}

impl Emitter<'_> {
    fn emit(&mut self, atom: usize, order: u8, out: &mut Vec<u8>) -> Result<(), ChemError> {
        let element = self.graph.element(atom);
        let id = self
            .alphabet
            .id_of(Symbol::atom(element, order))
            .ok_or_else(|| ChemError::UnencodableBond {
                element: element.to_string(),
                order,
            })?;
        out.push(id);
        self.derivation[atom] = self.counter;
        self.counter += 1;

        let mut earlier: Vec<usize> = self.tree.closures[atom]
            .iter()
            .copied()
            .filter(|&p| self.derivation[p] != usize::MAX)
            .collect();
        earlier.sort_by_key(|&p| std::cmp::Reverse(self.derivation[p]));
        for partner in earlier {
            let offset = self.derivation[atom] - self.derivation[partner];
            let ring = self.payload_symbols(Symbol::Ring(1), Symbol::Ring(2), offset - 1)?;
            out.extend(ring);
        }

        let children = self.tree.children[atom].clone();
        for (i, &(child, bond_order)) in children.iter().enumerate() {
            if i + 1 == children.len() {
                self.emit(child, bond_order, out)?;
            } else {
                let mut body = Vec::new();
                self.emit(child, bond_order, &mut body)?;
                let header = self
                    .payload_symbols(Symbol::Branch(1), Symbol::Branch(2), body.len() - 1)
                    .map_err(|_| ChemError::BranchTooLong(body.len()))?;
                out.extend(header);
                out.extend(body);
            }
        }
        Ok(())
    }

    fn payload_symbols(&self, one: Symbol, two: Symbol, q: usize) -> Result<Vec<u8>, ChemError> {
        let a = self.alphabet;
        if q < 16 {
            Ok(vec![
                a.id_of(one).expect("control symbol"),
                a.index_symbol(q),
            ])
        } else if q < 256 {
            Ok(vec![
                a.id_of(two).expect("control symbol"),
                a.index_symbol(q / 16),
                a.index_symbol(q % 16),
            ])
        } else {
            Err(ChemError::TooLong {
                required: q + 1,
                limit: 256,
            })
        }
    }
}
