//! Chemistry layer: hydrogen-suppressed molecular graphs with a valence
//! model, ring perception, canonical keys, circular fingerprints, a SMILES
//! subset writer and a total SELFIES-dialect codec.

mod canon;
mod error;
mod fingerprint;
mod graph;
mod rings;
pub mod selfies;
mod smiles;
pub mod synth;

pub use canon::{canonical_key, canonical_permutation};
pub use error::ChemError;
pub use fingerprint::{
    diversity, diversity_of, fingerprint, tanimoto, Fingerprint, DEFAULT_NBITS, DEFAULT_RADIUS,
};
pub use graph::{Bond, Element, MolGraph};
pub use rings::{ring_membership, ring_sizes, sssr};
pub use selfies::{Alphabet, SelfiesString, Symbol};
pub use smiles::to_smiles;
