use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::student::StudentMode;
use super::LossWeights;
use crate::error::{Error, Result};

/// Named student-training recipes, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Symmetric student trained on labels only.
    Direct,
    /// Symmetric student, labels plus score distillation.
    Distill,
    /// Asymmetric student on the frozen teacher document index.
    Inherit,
    /// `Inherit` plus query embedding matching.
    EmbedMatch,
    /// `EmbedMatch` plus generated queries in the embedding-matching term.
    QueryGen,
    /// Asymmetric student trained with query embedding matching only.
    EmbedOnly,
    EmbedOnlyQueryGen,
    /// `QueryGen` with the embedding-matching weight raised to 5.
    MiniQueryGen,
    /// `EmbedMatch` augmented with random token sequences instead of
    /// generated queries.
    RandomQueries,
    /// Symmetric student with score distillation and both embedding terms.
    SymmetricEmbedMatch,
}

/// Source of extra unlabeled queries for the embedding-matching term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    None,
    Generated,
    Random,
}

impl Preset {
    pub const ALL: [Preset; 10] = [
        Preset::Direct,
        Preset::Distill,
        Preset::Inherit,
        Preset::EmbedMatch,
        Preset::QueryGen,
        Preset::EmbedOnly,
        Preset::EmbedOnlyQueryGen,
        Preset::MiniQueryGen,
        Preset::RandomQueries,
        Preset::SymmetricEmbedMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Direct => "direct",
            Preset::Distill => "distill",
            Preset::Inherit => "inherit",
            Preset::EmbedMatch => "embed-match",
            Preset::QueryGen => "querygen",
            Preset::EmbedOnly => "embed-only",
            Preset::EmbedOnlyQueryGen => "embed-only-querygen",
            Preset::MiniQueryGen => "mini+querygen",
            Preset::RandomQueries => "random-queries",
            Preset::SymmetricEmbedMatch => "symmetric-embed-match",
        }
    }

    /// Row number in the ablation tables, for presets that have one.
    pub fn table_row(self) -> Option<usize> {
        match self {
            Preset::Direct => Some(1),
            Preset::Distill => Some(2),
            Preset::Inherit => Some(3),
            Preset::EmbedMatch => Some(4),
            Preset::QueryGen => Some(5),
            Preset::EmbedOnly => Some(6),
            Preset::EmbedOnlyQueryGen => Some(7),
            _ => None,
        }
    }

    pub fn mode(self) -> StudentMode {
        match self {
            Preset::Direct | Preset::Distill | Preset::SymmetricEmbedMatch => StudentMode::Symmetric,
            _ => StudentMode::AsymmetricInheritDocs,
        }
    }

    pub fn weights(self) -> LossWeights {
        let base = LossWeights::default();
        match self {
            Preset::Direct => LossWeights {
                score_distill: 0.0,
                ..base
            },
            Preset::Distill | Preset::Inherit => base,
            Preset::EmbedMatch | Preset::QueryGen | Preset::RandomQueries => LossWeights {
                embed_q: 1.0,
                ..base
            },
            Preset::EmbedOnly | Preset::EmbedOnlyQueryGen => LossWeights {
                onehot: 0.0,
                score_distill: 0.0,
                embed_q: 1.0,
                ..base
            },
            Preset::MiniQueryGen => LossWeights {
                embed_q: 5.0,
                ..base
            },
            Preset::SymmetricEmbedMatch => LossWeights {
                embed_q: 1.0,
                embed_d: 1.0,
                ..base
            },
        }
    }

    pub fn augmentation(self) -> Augmentation {
        match self {
            Preset::QueryGen | Preset::EmbedOnlyQueryGen | Preset::MiniQueryGen => {
                Augmentation::Generated
            }
            Preset::RandomQueries => Augmentation::Random,
            _ => Augmentation::None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// Accepts preset names and `table1-rowN` aliases.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(row) = s.strip_prefix("table1-row") {
            let row: usize = row
                .parse()
                .map_err(|_| Error::invalid(format!("unknown preset {s:?}")))?;
            return Preset::ALL
                .into_iter()
                .find(|p| p.table_row() == Some(row))
                .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")));
        }
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::invalid(format!("unknown preset {s:?}; expected one of {names:?} or table1-row1..7"))
            })
    }
}
