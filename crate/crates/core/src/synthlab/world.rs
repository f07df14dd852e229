use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::mechinterp::HiddenStateDecoder;
use crate::vecops;

/// Score an entity direction needs in a state to be decoded.
pub const DECODE_THRESHOLD: f64 = 0.5;

const FIRST: [&str; 16] = [
    "Ada", "Boris", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Luca", "Mira",
    "Nils", "Olga", "Pavel",
];
const LAST: [&str; 16] = [
    "Varga", "Lindqvist", "Okafor", "Moreau", "Tanaka", "Novak", "Castell", "Brandt", "Ferreira", "Holm", "Rossi",
    "Quint", "Szabo", "Wren", "Yilmaz", "Zorn",
];
const RELATIONS: [&str; 8] = [
    "mentor of",
    "rival of",
    "founder of",
    "sibling of",
    "partner of",
    "student of",
    "employer of",
    "neighbor of",
];

/// A closed world of named entities, bijective relations between them and
/// an orthonormal direction per entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub entities: Vec<String>,
    /// relation name → image of entity `i` at position `i`
    pub relations: BTreeMap<String, Vec<usize>>,
    pub d_model: usize,
    /// unit vector per entity, same order as `entities`
    pub directions: Vec<Vec<f64>>,
    /// Extra unit direction orthogonal to every entity, used as the planted
    /// faithfulness signal. Absent when `d_model == n_entities`.
    pub faith_direction: Option<Vec<f64>>,
    pub rng_seed: u64,
}

fn entity_name(i: usize) -> String {
    format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len() + i) % LAST.len()])
}

fn relation_name(i: usize) -> String {
    RELATIONS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("relation{i} of"))
}

/// Gaussian vectors run through Gram-Schmidt; exactly orthonormal up to
/// rounding.
pub(crate) fn orthonormal_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // two passes keep the basis orthogonal to ~1e-15
        for _ in 0..2 {
            for u in &out {
                let p = vecops::dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let n = vecops::norm(&v);
        if n > 1e-6 {
            out.push(vecops::scale(&v, 1.0 / n));
        }
    }
    out
}

pub fn generate_world(n_entities: usize, n_relations: usize, d_model: usize, seed: u64) -> Result<SynthWorld> {
    if n_entities < 2 {
        return Err(FaithError::invalid("a world needs at least 2 entities"));
    }
    if n_entities > FIRST.len() * LAST.len() {
        return Err(FaithError::invalid(format!("at most {} entities supported", FIRST.len() * LAST.len())));
    }
    if d_model < n_entities {
        return Err(FaithError::invalid(format!(
            "d_model {d_model} < n_entities {n_entities}: cannot orthogonalize entity directions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_dirs = if d_model > n_entities { n_entities + 1 } else { n_entities };
    let mut dirs = orthonormal_vectors(n_dirs, d_model, &mut rng);
    let faith_direction = (n_dirs > n_entities).then(|| dirs.pop().expect("faith direction"));
    let relations = (0..n_relations)
        .map(|i| {
            let mut perm: Vec<usize> = (0..n_entities).collect();
            perm.shuffle(&mut rng);
            (relation_name(i), perm)
        })
        .collect();
    Ok(SynthWorld {
        entities: (0..n_entities).map(entity_name).collect(),
        relations,
        d_model,
        directions: dirs,
        faith_direction,
        rng_seed: seed,
    })
}

impl SynthWorld {
    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == name)
    }

    pub fn direction(&self, name: &str) -> Option<&[f64]> {
        self.entity_index(name).map(|i| self.directions[i].as_slice())
    }

    pub fn relation_names(&self) -> Vec<&str> {
        self.relations.keys().map(String::as_str).collect()
    }

    pub fn apply(&self, relation: &str, entity: usize) -> Option<usize> {
        self.relations.get(relation).and_then(|p| p.get(entity).copied())
    }
}

/// Entities whose direction scores at least [`DECODE_THRESHOLD`] in `h`,
/// strongest first.
pub fn decode_hidden(world: &SynthWorld, h: &[f64]) -> Result<Vec<String>> {
    if h.len() != world.d_model {
        return Err(FaithError::DimensionMismatch {
            expected: world.d_model,
            found: h.len(),
        });
    }
    let mut hits: Vec<(f64, usize)> = world
        .directions
        .iter()
        .enumerate()
        .map(|(i, d)| (vecops::dot(h, d), i))
        .filter(|(s, _)| *s >= DECODE_THRESHOLD)
        .collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(hits.into_iter().map(|(_, i)| world.entities[i].clone()).collect())
}

/// [`decode_hidden`] behind the decoder interface.
pub struct SynthDecoder<'w> {
    pub world: &'w SynthWorld,
}

impl HiddenStateDecoder for SynthDecoder<'_> {
    fn decode(&self, h: &[f32]) -> Result<Vec<String>> {
        decode_hidden(self.world, &vecops::to_f64(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_checked() {
        assert_eq!(generate_world(4, 2, 16, 7).unwrap(), generate_world(4, 2, 16, 7).unwrap());
        assert_ne!(generate_world(4, 2, 16, 7).unwrap(), generate_world(4, 2, 16, 8).unwrap());
        assert!(generate_world(4, 2, 2, 7).is_err());
        assert!(generate_world(1, 2, 2, 7).is_err());
    }

    #[test]
    fn relations_are_bijections() {
        let w = generate_world(12, 5, 16, 3).unwrap();
        for perm in w.relations.values() {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        }
        let names: std::collections::BTreeSet<_> = w.entities.iter().collect();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn square_world_has_no_faith_direction() {
        let w = generate_world(4, 1, 4, 0).unwrap();
        assert!(w.faith_direction.is_none());
        assert!(generate_world(4, 1, 5, 0).unwrap().faith_direction.is_some());
    }

    #[test]
    fn decode_examples() {
        let w = generate_world(4, 2, 16, 7).unwrap();
        assert_eq!(decode_hidden(&w, &w.directions[1]).unwrap(), vec![w.entities[1].clone()]);
        assert!(decode_hidden(&w, &[0.0; 16]).unwrap().is_empty());
        let h: Vec<f64> = (0..16).map(|i| 0.8 * w.directions[0][i] + 0.9 * w.directions[2][i]).collect();
        assert_eq!(decode_hidden(&w, &h).unwrap(), vec![w.entities[2].clone(), w.entities[0].clone()]);
        assert!(decode_hidden(&w, &[0.0; 3]).is_err());
    }
}
