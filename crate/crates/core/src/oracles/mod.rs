//! Property oracles: surrogate scorers, an external-process client and a
//! persistent score cache.

mod cache;
mod external;
pub mod thermo;

use limo_chem::{ring_membership, ring_sizes, Element, MolGraph};
use serde::{Deserialize, Serialize};

pub use cache::{CachedOracle, OracleCache};
pub use external::{ExternalConfig, ExternalOracle};

use crate::error::{LimoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// +1 for maximize, −1 for minimize.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }
}

/// Outcome for one molecule of a batch.
pub type ItemScore = std::result::Result<f64, String>;

pub trait PropertyOracle: Send + Sync {
    fn name(&self) -> &str;

    fn direction(&self) -> Direction;

    /// Scores a batch. The outer error means the whole batch failed.
    fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>>;

    fn score(&self, mol: &MolGraph) -> Result<f64> {
        let mut out = self.score_batch(std::slice::from_ref(mol))?;
        out.pop()
            .ok_or_else(|| LimoError::Oracle("empty batch result".into()))?
            .map_err(LimoError::Oracle)
    }
}

impl<O: PropertyOracle + ?Sized> PropertyOracle for Box<O> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn direction(&self) -> Direction {
        (**self).direction()
    }

    fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>> {
        (**self).score_batch(mols)
    }
}

fn logp_contribution(e: Element) -> f64 {
    match e {
        Element::C => 0.2,
        Element::N => -0.6,
        Element::O => -0.4,
        Element::F => 0.1,
        Element::Cl => 0.6,
        Element::Br => 0.9,
        Element::S => 0.4,
        Element::P => 0.1,
    }
}

/// Per-element contributions minus 0.1 per ring atom.
pub fn logp_surrogate(g: &MolGraph) -> f64 {
    let atoms: f64 = g.atoms().iter().map(|&e| logp_contribution(e)).sum();
    let ring_atoms = ring_membership(g).iter().filter(|&&r| r).count();
    atoms - 0.1 * ring_atoms as f64
}

fn ring_count(g: &MolGraph) -> usize {
    ring_sizes(g).len()
}

/// Synthetic accessibility stand-in on [1, 10]; lower is easier.
pub fn sa_surrogate(g: &MolGraph) -> f64 {
    let heavy = g.atom_count() as f64;
    let sizes = ring_sizes(g);
    let macro_rings = sizes.iter().filter(|&&s| s > 8).count() as f64;
    let crowded = (0..g.atom_count()).filter(|&i| g.degree(i) >= 4).count() as f64;
    let raw = 1.0
        + 0.05 * (heavy - 20.0).max(0.0)
        + 0.3 * sizes.len() as f64
        + macro_rings
        + 0.2 * crowded;
    raw.clamp(1.0, 10.0)
}

fn desirability(x: f64, mode: f64, width: f64) -> f64 {
    (-(x - mode).powi(2) / (2.0 * width * width)).exp()
}

/// Drug-likeness stand-in on (0, 1].
pub fn qed_surrogate(g: &MolGraph) -> f64 {
    let heavy = desirability(g.atom_count() as f64, 23.0, 8.0);
    let logp = desirability(logp_surrogate(g), 2.5, 2.0);
    let rings = desirability(ring_count(g) as f64, 2.0, 1.5);
    (heavy * logp * rings).cbrt()
}

/// logP′ − SA′ − (number of rings larger than six).
pub fn plogp(g: &MolGraph) -> f64 {
    let large = ring_sizes(g).iter().filter(|&&s| s > 6).count();
    logp_surrogate(g) - sa_surrogate(g) - large as f64
}

/// In-process scorers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    Logp,
    Sa,
    Qed,
    Plogp,
    /// Binding-energy stand-in: −0.1 kcal/mol per heavy atom.
    MockAffinity,
}

impl Surrogate {
    pub const ALL: [Surrogate; 5] = [
        Surrogate::Logp,
        Surrogate::Sa,
        Surrogate::Qed,
        Surrogate::Plogp,
        Surrogate::MockAffinity,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.label() == name)
    }

    pub fn label(self) -> &'static str {
        match self {
            Surrogate::Logp => "logp",
            Surrogate::Sa => "sa",
            Surrogate::Qed => "qed",
            Surrogate::Plogp => "plogp",
            Surrogate::MockAffinity => "mock-affinity",
        }
    }

    pub fn evaluate(self, g: &MolGraph) -> f64 {
        match self {
            Surrogate::Logp => logp_surrogate(g),
            Surrogate::Sa => sa_surrogate(g),
            Surrogate::Qed => qed_surrogate(g),
            Surrogate::Plogp => plogp(g),
            Surrogate::MockAffinity => -(g.atom_count() as f64) / 10.0,
        }
    }
}

impl PropertyOracle for Surrogate {
    fn name(&self) -> &str {
        self.label()
    }

    fn direction(&self) -> Direction {
        match self {
            Surrogate::Sa | Surrogate::MockAffinity => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }

    fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>> {
        Ok(mols.iter().map(|g| Ok(self.evaluate(g))).collect())
    }
}
