//! Behavioural categories for 2-hop predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::FaithError;

/// The ten disjoint 2-hop categories. C1–C5 cover wrong predictions,
/// C6–C10 correct ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
    C10,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::C1,
        Category::C2,
        Category::C3,
        Category::C4,
        Category::C5,
        Category::C6,
        Category::C7,
        Category::C8,
        Category::C9,
        Category::C10,
    ];

    /// Zero-based position, C1 → 0.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::C1 => "Complete reasoning failure",
            Category::C2 => "Internal-external reasoning mismatch",
            Category::C3 => "Explanation-prediction association",
            Category::C4 => "First-hop reasoning failure",
            Category::C5 => "Second-hop reasoning failure",
            Category::C6 => "Shortcut learning",
            Category::C7 => "Deceptiveness or hallucination",
            Category::C8 => "Explainer parrot",
            Category::C9 => "Alternative reasoning pathway",
            Category::C10 => "Reliable oracle",
        }
    }

    pub fn prediction_correct(self) -> bool {
        self.index() >= 5
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.index() + 1)
    }
}

impl FromStr for Category {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('C')
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(|n| n.checked_sub(1))
            .and_then(Category::from_index)
            .ok_or_else(|| FaithError::invalid(format!("unknown category {s:?}")))
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Four-way taxonomy from prediction and bridge correctness only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Simplified {
    /// wrong prediction, wrong bridge: likely first-hop failure
    A,
    /// wrong prediction, correct bridge: likely second-hop failure
    B,
    /// correct prediction, wrong bridge: alternative pathway
    C,
    /// correct prediction, correct bridge: canonical reasoning
    D,
}

impl fmt::Display for Simplified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub fn classify_taxonomy(
    prediction_correct: bool,
    faithful: bool,
    self_nle_correct: bool,
    gold_bridge_detected: bool,
) -> Category {
    use Category::*;
    match (prediction_correct, faithful, self_nle_correct, gold_bridge_detected) {
        (false, false, false, false) => C1,
        (false, false, false, true) => C2,
        (false, false, true, _) => C3,
        (false, true, false, _) => C4,
        (false, true, true, _) => C5,
        (true, false, false, false) => C6,
        (true, false, false, true) => C7,
        (true, false, true, _) => C8,
        (true, true, false, _) => C9,
        (true, true, true, _) => C10,
    }
}

pub fn classify_simplified(prediction_correct: bool, self_nle_correct: bool) -> Simplified {
    match (prediction_correct, self_nle_correct) {
        (false, false) => Simplified::A,
        (false, true) => Simplified::B,
        (true, false) => Simplified::C,
        (true, true) => Simplified::D,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Category membership written out condition by condition from the
    /// category definitions, independent of the match table above.
    fn definition_holds(c: Category, pred: bool, faith: bool, nle: bool, det: bool) -> bool {
        use Category::*;
        match c {
            C1 => !pred && !faith && !nle && !det,
            C2 => !pred && !faith && !nle && det,
            C3 => !pred && !faith && nle,
            C4 => !pred && faith && !nle,
            C5 => !pred && faith && nle,
            C6 => pred && !faith && !nle && !det,
            C7 => pred && !faith && !nle && det,
            C8 => pred && !faith && nle,
            C9 => pred && faith && !nle,
            C10 => pred && faith && nle,
        }
    }

    #[test]
    fn table_is_a_partition_of_the_flag_space() {
        let mut preimage: BTreeMap<Category, Vec<[bool; 4]>> = BTreeMap::new();
        for bits in 0u8..16 {
            let f = [bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0];
            let got = classify_taxonomy(f[0], f[1], f[2], f[3]);
            let matching: Vec<Category> = Category::ALL
                .iter()
                .copied()
                .filter(|&c| definition_holds(c, f[0], f[1], f[2], f[3]))
                .collect();
            assert_eq!(matching, vec![got], "flags {f:?}");
            preimage.entry(got).or_default().push(f);
        }
        assert_eq!(preimage.len(), 10);
        assert_eq!(preimage.values().map(Vec::len).sum::<usize>(), 16);
    }

    #[test]
    fn named_examples() {
        assert_eq!(classify_taxonomy(false, false, false, false), Category::C1);
        assert_eq!(classify_taxonomy(true, false, false, false), Category::C6);
        assert_eq!(classify_taxonomy(true, true, true, false), Category::C10);
        assert_eq!(classify_taxonomy(true, true, true, true), Category::C10);
    }

    #[test]
    fn simplified_examples() {
        assert_eq!(classify_simplified(false, true), Simplified::B);
        assert_eq!(classify_simplified(true, true), Simplified::D);
        assert_eq!(classify_simplified(true, false), Simplified::C);
        assert_eq!(classify_simplified(false, false), Simplified::A);
    }

    #[test]
    fn category_strings() {
        for c in Category::ALL {
            assert_eq!(c.to_string().parse::<Category>().unwrap(), c);
        }
        assert_eq!(Category::C10.to_string(), "C10");
        assert!("C11".parse::<Category>().is_err());
        assert!("C0".parse::<Category>().is_err());
    }
}
