//! Synthetic pathology scenes: cell layouts, morphology attributes,
//! templated reference reports and the token vocabulary.

pub mod dataset;
mod generate;
mod report;
pub mod stats;
mod vocab;

use serde::{Deserialize, Serialize};

pub use generate::{generate_scene, SceneParams};
pub use report::{
    conclusion_phrase, degree_words, render_report, DegreeWords, INSUFFICIENT_BELOW, NN_DISTANCE_CUTS, NUCLEOLI_CUTS,
    NUM_STYLES, PLEOMORPHISM_CUTS, POLARITY_CUTS,
};
pub use stats::SceneStats;
pub use vocab::{Vocabulary, BOS, BOS_TOKEN, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

/// Number of per-cell attributes.
pub const NUM_ATTRS: usize = 8;

/// Attribute order inside [`Cell::attrs`].
pub mod attr {
    pub const AREA: usize = 0;
    pub const ECCENTRICITY: usize = 1;
    pub const IRREGULARITY: usize = 2;
    pub const CHROMATIN: usize = 3;
    pub const NUCLEOLUS: usize = 4;
    pub const MITOSIS: usize = 5;
    pub const CROWDING: usize = 6;
    pub const POLARITY: usize = 7;

    pub const NAMES: [&str; super::NUM_ATTRS] = [
        "area",
        "eccentricity",
        "irregularity",
        "chromatin",
        "nucleolus",
        "mitosis",
        "crowding",
        "polarity",
    ];
}

/// Lesion class after merging "normal" and "insufficient information".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    HighGrade,
    LowGrade,
    NormalOrInsufficient,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::HighGrade, Grade::LowGrade, Grade::NormalOrInsufficient];

    pub fn index(self) -> usize {
        match self {
            Grade::HighGrade => 0,
            Grade::LowGrade => 1,
            Grade::NormalOrInsufficient => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub attrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub grade: Grade,
    pub cells: Vec<Cell>,
    /// Reference reports; each ends with [`EOS_TOKEN`].
    pub reports: Vec<Vec<String>>,
    pub seed: u64,
}

impl Scene {
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    /// Checks the structural invariants a loaded scene must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err("non-positive scene size".into());
        }
        if self.cells.is_empty() && self.grade != Grade::NormalOrInsufficient {
            return Err("lesion scene without cells".into());
        }
        for c in &self.cells {
            if !(0.0..self.width).contains(&c.x) || !(0.0..self.height).contains(&c.y) {
                return Err(format!("cell {} out of bounds", c.id));
            }
            if c.attrs.len() != NUM_ATTRS || c.attrs.iter().any(|a| !a.is_finite()) {
                return Err(format!("cell {} has malformed attributes", c.id));
            }
        }
        if self.reports.is_empty() || self.reports.len() > 5 {
            return Err(format!("{} reports (expected 1-5)", self.reports.len()));
        }
        if self.reports.iter().any(|r| r.last().map(String::as_str) != Some(EOS_TOKEN)) {
            return Err("report without end token".into());
        }
        Ok(())
    }

    /// Same attributes, positions redrawn uniformly at random.
    pub fn with_scrambled_positions(&self, seed: u64) -> Scene {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for c in &mut out.cells {
            c.x = rng.gen_range(0.0..self.width);
            c.y = rng.gen_range(0.0..self.height);
        }
        out
    }
}

/// Vocabulary over every token of `reports`.
pub fn build_vocabulary<'a>(reports: impl IntoIterator<Item = &'a Vec<String>>) -> Vocabulary {
    Vocabulary::build(reports)
}
