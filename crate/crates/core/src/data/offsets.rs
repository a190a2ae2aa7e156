use std::collections::BTreeMap;

use super::Dataset;
use crate::env::{Oracle, State};
use crate::error::{Error, Result};

/// Shortest observed offset `j - i` (with `i < j`) between ordered
/// ground-truth states over every trajectory in a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OffsetTable {
    entries: BTreeMap<(State, State), u32>,
}

impl OffsetTable {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("offset table needs a nonempty dataset"));
        }
        let mut entries: BTreeMap<(State, State), u32> = BTreeMap::new();
        for traj in &ds.trajectories {
            let states = &traj.states;
            for i in 0..states.len() {
                for j in i + 1..states.len() {
                    let d = (j - i) as u32;
                    entries
                        .entry((states[i], states[j]))
                        .and_modify(|e| *e = (*e).min(d))
                        .or_insert(d);
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, s: State, g: State) -> Option<u32> {
        self.entries.get(&(s, g)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (State, State, u32)> + '_ {
        self.entries.iter().map(|(&(s, g), &d)| (s, g, d))
    }

    /// Entries where the observed offset undercuts the true hitting time.
    pub fn violations(&self, oracle: &Oracle) -> Vec<(State, State, u32, Option<u32>)> {
        self.iter()
            .filter_map(|(s, g, d)| match oracle.distance(s, g) {
                Some(star) if star <= d => None,
                other => Some((s, g, d, other)),
            })
            .collect()
    }

    /// `max D_D / D*` over entries with `D* >= 1`.
    pub fn competitiveness(&self, oracle: &Oracle) -> f64 {
        self.iter()
            .filter_map(|(s, g, d)| {
                let star = oracle.distance(s, g)?;
                (star >= 1).then(|| f64::from(d) / f64::from(star))
            })
            .fold(1.0, f64::max)
    }
}
