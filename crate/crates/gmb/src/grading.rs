//! Gleason/ISUP ordinal algebra.
//!
//! Pattern pairs, the fixed 10-entry Gleason-score encoding, the grade-group
//! mapping, the pattern-pair correction rule applied to raw model outputs,
//! and the clinically-significant-error predicate. All functions here are
//! pure and total on their domain types; invalid clinical notation is
//! rejected at parse time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq, Clone)]
pub enum GradingError {
    #[error("pattern code {0} out of range (expected 0..=3)")]
    PatternCode(u8),
    #[error("clinical pattern {0} is not one of 0, 3, 4, 5")]
    ClinicalPattern(String),
    #[error("mixed pattern pair {0}+{1}; correct the pair before encoding")]
    MixedPair(u8, u8),
    #[error("ISUP grade {0} out of range (expected 0..=5)")]
    IsupRange(String),
    #[error("cannot parse {0:?} as a Gleason score")]
    ScoreSyntax(String),
    #[error("ordinal {0} out of range (expected 0..=9)")]
    OrdinalRange(u8),
}

/// One Gleason pattern on the evenly spaced ordinal scale:
/// 0 = benign, 1 = pattern 3, 2 = pattern 4, 3 = pattern 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GleasonPattern(u8);

impl GleasonPattern {
    pub const BENIGN: GleasonPattern = GleasonPattern(0);

    pub fn new(code: u8) -> Result<Self, GradingError> {
        if code > 3 {
            return Err(GradingError::PatternCode(code));
        }
        Ok(GleasonPattern(code))
    }

    /// Ordinal code in 0..=3.
    pub fn code(self) -> u8 {
        self.0
    }

    /// Clinical pattern number: 0 (benign), 3, 4 or 5.
    pub fn clinical(self) -> u8 {
        match self.0 {
            0 => 0,
            c => c + 2,
        }
    }

    /// Parse a clinical pattern number. Patterns 1 and 2 are obsolete and
    /// rejected, mirroring the exclusion of erroneous score reporting.
    pub fn from_clinical(value: u8) -> Result<Self, GradingError> {
        match value {
            0 => Ok(GleasonPattern(0)),
            3..=5 => Ok(GleasonPattern(value - 2)),
            other => Err(GradingError::ClinicalPattern(other.to_string())),
        }
    }

    pub fn is_benign(self) -> bool {
        self.0 == 0
    }
}

/// A corrected primary+secondary pattern pair. Either both patterns are
/// benign or both are non-benign; mixed pairs cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GleasonScore {
    primary: GleasonPattern,
    secondary: GleasonPattern,
}

impl GleasonScore {
    pub const BENIGN: GleasonScore = GleasonScore {
        primary: GleasonPattern(0),
        secondary: GleasonPattern(0),
    };

    /// Build a score from already-consistent patterns. A pair mixing benign
    /// with a non-benign pattern signals an uncorrected raw output and is
    /// rejected; run [`correct_pattern_pair`] first.
    pub fn new(primary: GleasonPattern, secondary: GleasonPattern) -> Result<Self, GradingError> {
        if primary.is_benign() != secondary.is_benign() {
            return Err(GradingError::MixedPair(primary.code(), secondary.code()));
        }
        Ok(GleasonScore { primary, secondary })
    }

    pub fn primary(self) -> GleasonPattern {
        self.primary
    }

    pub fn secondary(self) -> GleasonPattern {
        self.secondary
    }

    pub fn is_benign(self) -> bool {
        self.primary.is_benign()
    }

    /// All ten valid scores in ordinal order.
    pub fn all() -> [GleasonScore; 10] {
        ORDINAL_TABLE.map(|(p, s)| GleasonScore {
            primary: GleasonPattern(p),
            secondary: GleasonPattern(s),
        })
    }
}

impl fmt::Display for GleasonScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_benign() {
            write!(f, "benign")
        } else {
            write!(
                f,
                "{}+{}",
                self.primary.clinical(),
                self.secondary.clinical()
            )
        }
    }
}

impl FromStr for GleasonScore {
    type Err = GradingError;

    /// Accepts clinical notation: "4+3", "0+0", "benign". Raw pairs mixing a
    /// zero with a non-zero pattern are normalized via the correction rule,
    /// so "0+3" parses to 3+3.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed.eq_ignore_ascii_case("benign") {
            return Ok(GleasonScore::BENIGN);
        }
        let (p, q) = trimmed
            .split_once('+')
            .ok_or_else(|| GradingError::ScoreSyntax(s.to_string()))?;
        let parse = |tok: &str| -> Result<GleasonPattern, GradingError> {
            let v: u8 = tok
                .trim()
                .parse()
                .map_err(|_| GradingError::ScoreSyntax(s.to_string()))?;
            GleasonPattern::from_clinical(v)
        };
        Ok(correct_pattern_pair(parse(p)?, parse(q)?))
    }
}

/// ISUP grade group; 0 denotes benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IsupGrade(u8);

impl IsupGrade {
    pub fn new(grade: u8) -> Result<Self, GradingError> {
        if grade > 5 {
            return Err(GradingError::IsupRange(grade.to_string()));
        }
        Ok(IsupGrade(grade))
    }

    pub fn grade(self) -> u8 {
        self.0
    }

    pub fn is_benign(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for IsupGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for IsupGrade {
    type Err = GradingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("benign") {
            return Ok(IsupGrade(0));
        }
        let v: u8 = t
            .parse()
            .map_err(|_| GradingError::IsupRange(s.to_string()))?;
        IsupGrade::new(v)
    }
}

/// Position of a score in the fixed 10-entry ordinal encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GsOrdinal(u8);

impl GsOrdinal {
    pub fn new(value: u8) -> Result<Self, GradingError> {
        if value > 9 {
            return Err(GradingError::OrdinalRange(value));
        }
        Ok(GsOrdinal(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for GsOrdinal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

// Pattern-code pairs in ordinal order:
// benign, 3+3, 3+4, 4+3, 3+5, 4+4, 5+3, 4+5, 5+4, 5+5.
const ORDINAL_TABLE: [(u8, u8); 10] = [
    (0, 0),
    (1, 1),
    (1, 2),
    (2, 1),
    (1, 3),
    (2, 2),
    (3, 1),
    (2, 3),
    (3, 2),
    (3, 3),
];

/// Duplicate the non-zero pattern when exactly one of the raw patterns is
/// benign; pass consistent pairs through unchanged. Idempotent.
pub fn correct_pattern_pair(
    raw_primary: GleasonPattern,
    raw_secondary: GleasonPattern,
) -> GleasonScore {
    let (p, s) = match (raw_primary.is_benign(), raw_secondary.is_benign()) {
        (true, false) => (raw_secondary, raw_secondary),
        (false, true) => (raw_primary, raw_primary),
        _ => (raw_primary, raw_secondary),
    };
    GleasonScore {
        primary: p,
        secondary: s,
    }
}

/// Index of a score in the fixed encoding table; bijective over the ten
/// valid scores.
pub fn encode_gs_ordinal(score: GleasonScore) -> GsOrdinal {
    let key = (score.primary.code(), score.secondary.code());
    let idx = ORDINAL_TABLE
        .iter()
        .position(|&entry| entry == key)
        .expect("GleasonScore invariant guarantees a table entry");
    GsOrdinal(idx as u8)
}

/// Inverse of [`encode_gs_ordinal`].
pub fn decode_gs_ordinal(ordinal: GsOrdinal) -> GleasonScore {
    let (p, s) = ORDINAL_TABLE[ordinal.value() as usize];
    GleasonScore {
        primary: GleasonPattern(p),
        secondary: GleasonPattern(s),
    }
}

/// Grade grouping: benign -> 0, 3+3 -> 1, 3+4 -> 2, 4+3 -> 3,
/// {4+4, 3+5, 5+3} -> 4, {4+5, 5+4, 5+5} -> 5.
pub fn gs_to_isup(score: GleasonScore) -> IsupGrade {
    if score.is_benign() {
        return IsupGrade(0);
    }
    let sum = score.primary.clinical() + score.secondary.clinical();
    let grade = match sum {
        6 => 1,
        7 => {
            if score.primary.clinical() == 3 {
                2
            } else {
                3
            }
        }
        8 => 4,
        _ => 5, // 9 or 10
    };
    IsupGrade(grade)
}

/// A clinically significant error: a cancer of at least grade 2 predicted
/// benign, or a benign sample predicted as at least grade 2.
pub fn is_significant_error(reference: IsupGrade, predicted: IsupGrade) -> bool {
    (reference.grade() >= 2 && predicted.grade() == 0)
        || (reference.grade() == 0 && predicted.grade() >= 2)
}
