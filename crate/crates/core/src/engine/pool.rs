use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::SampleId;
use crate::error::{Error, Result};

/// Partition of the pool ids into labeled, unlabeled and pending sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeSet<SampleId>,
    pub unlabeled: BTreeSet<SampleId>,
    pub pending: BTreeSet<SampleId>,
    pub labels: BTreeMap<SampleId, usize>,
    pub cycle_index: usize,
}

impl PoolState {
    pub fn new(ids: impl IntoIterator<Item = SampleId>) -> Self {
        Self {
            labeled: BTreeSet::new(),
            unlabeled: ids.into_iter().collect(),
            pending: BTreeSet::new(),
            labels: BTreeMap::new(),
            cycle_index: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.pending.len()
    }

    /// Moves unlabeled ids into the pending set.
    pub fn mark_pending(&mut self, ids: &[SampleId]) -> Result<()> {
        for id in ids {
            if !self.unlabeled.contains(id) {
                return Err(Error::Contract(format!("sample {id} is not unlabeled")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.pending.insert(*id);
        }
        Ok(())
    }

    /// Records a label for a pending (or, for the seed set, unlabeled) id.
    pub fn assign(&mut self, id: SampleId, class: usize) -> Result<()> {
        if self.labeled.contains(&id) {
            return Err(Error::Contract(format!("sample {id} already labeled")));
        }
        if !(self.pending.remove(&id) || self.unlabeled.remove(&id)) {
            return Err(Error::Contract(format!("sample {id} is not in the pool")));
        }
        self.labeled.insert(id);
        self.labels.insert(id, class);
        Ok(())
    }

    /// Checks disjointness and label coverage.
    pub fn check(&self) -> Result<()> {
        if !self.labeled.is_disjoint(&self.unlabeled)
            || !self.labeled.is_disjoint(&self.pending)
            || !self.unlabeled.is_disjoint(&self.pending)
        {
            return Err(Error::Contract("pool id sets overlap".into()));
        }
        if self.labels.len() != self.labeled.len()
            || !self.labeled.iter().all(|id| self.labels.contains_key(id))
        {
            return Err(Error::Contract("labeled ids and labels disagree".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_conserve_ids() {
        let mut s = PoolState::new(0..10);
        s.assign(3, 1).unwrap();
        s.mark_pending(&[4, 5]).unwrap();
        assert_eq!(s.total(), 10);
        s.assign(4, 0).unwrap();
        assert!(s.assign(4, 0).is_err());
        assert!(s.mark_pending(&[3]).is_err());
        assert!(s.assign(42, 0).is_err());
        s.check().unwrap();
        assert_eq!(s.total(), 10);
        assert_eq!(s.pending.len(), 1);
    }
}
