use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::synchro::{Counts, UnitStatus};
use crate::tmn::CompartmentId;
use crate::wire::AckStatus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("unit {0} is not part of the placement set")]
    UnknownUnit(CompartmentId),
    #[error("epoch {requested} cannot close; next open epoch is {next}")]
    OutOfOrder { requested: u64, next: u64 },
}

/// What one unit contributes to a closed epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedEntry {
    pub counts: Counts,
    pub status: UnitStatus,
}

/// Per-unit contributions for one closed epoch; every unit of `U` is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSet {
    pub epoch: u64,
    pub entries: BTreeMap<CompartmentId, AlignedEntry>,
}

/// Collects reports per epoch and closes epochs strictly in order. A unit
/// that misses an epoch is filled with its last fresh report for up to
/// `max_staleness` epochs, then with an empty, absent-flagged report.
#[derive(Debug, Clone)]
pub struct EpochLedger {
    units: BTreeSet<CompartmentId>,
    max_staleness: u64,
    next_to_close: u64,
    open: BTreeMap<u64, BTreeMap<CompartmentId, Counts>>,
    last_fresh: BTreeMap<CompartmentId, (u64, Counts)>,
}

impl EpochLedger {
    pub fn new(units: impl IntoIterator<Item = CompartmentId>, max_staleness: u64) -> Self {
        EpochLedger {
            units: units.into_iter().collect(),
            max_staleness,
            next_to_close: 0,
            open: BTreeMap::new(),
            last_fresh: BTreeMap::new(),
        }
    }

    pub fn next_open_epoch(&self) -> u64 {
        self.next_to_close
    }

    pub fn is_closed(&self, epoch: u64) -> bool {
        epoch < self.next_to_close
    }

    /// Highest epoch holding any report not yet closed.
    pub fn highest_pending(&self) -> Option<u64> {
        self.open.keys().next_back().copied()
    }

    /// Records a report. Closed epochs are never touched again.
    pub fn submit(&mut self, unit: CompartmentId, epoch: u64, counts: Counts) -> Result<AckStatus, LedgerError> {
        if !self.units.contains(&unit) {
            return Err(LedgerError::UnknownUnit(unit));
        }
        if self.is_closed(epoch) {
            return Ok(AckStatus::Late);
        }
        let slot = self.open.entry(epoch).or_default();
        if slot.contains_key(&unit) {
            return Ok(AckStatus::Duplicate);
        }
        slot.insert(unit, counts);
        Ok(AckStatus::Accepted)
    }

    /// Closes `epoch`, which must be the next open epoch.
    pub fn align_epoch(&mut self, epoch: u64) -> Result<AlignedSet, LedgerError> {
        if epoch != self.next_to_close {
            return Err(LedgerError::OutOfOrder {
                requested: epoch,
                next: self.next_to_close,
            });
        }
        let mut fresh = self.open.remove(&epoch).unwrap_or_default();
        let mut entries = BTreeMap::new();
        for &unit in &self.units {
            let entry = match fresh.remove(&unit) {
                Some(counts) => {
                    self.last_fresh.insert(unit, (epoch, counts.clone()));
                    AlignedEntry {
                        counts,
                        status: UnitStatus::Fresh,
                    }
                }
                None => match self.last_fresh.get(&unit) {
                    Some((from, counts)) if epoch - from <= self.max_staleness => AlignedEntry {
                        counts: counts.clone(),
                        status: UnitStatus::Stale(epoch - from),
                    },
                    _ => AlignedEntry {
                        counts: Counts::new(),
                        status: UnitStatus::Absent,
                    },
                },
            };
            entries.insert(unit, entry);
        }
        self.next_to_close += 1;
        Ok(AlignedSet { epoch, entries })
    }
}

/// Wall-clock schedule of a session: epoch `n` covers
/// `[origin + n*period, origin + (n+1)*period)` and closes `grace_ms` after
/// its end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochClock {
    pub origin_ms: u64,
    pub period_ms: u64,
    pub grace_ms: u64,
}

impl EpochClock {
    pub fn slot_start(&self, epoch: u64) -> u64 {
        self.origin_ms + epoch * self.period_ms
    }

    pub fn deadline(&self, epoch: u64) -> u64 {
        self.slot_start(epoch + 1) + self.grace_ms
    }

    /// Whether the grace window of `epoch` has expired at `now_ms`.
    pub fn is_due(&self, epoch: u64, now_ms: u64) -> bool {
        now_ms >= self.deadline(epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synchro::ClassId;

    const U1: CompartmentId = CompartmentId(1);
    const U2: CompartmentId = CompartmentId(2);

    fn counts(q: u32, c: u32) -> Counts {
        [(ClassId(q), c)].into()
    }

    fn ledger(max_staleness: u64) -> EpochLedger {
        EpochLedger::new([U1, U2], max_staleness)
    }

    fn close_through(l: &mut EpochLedger, last: u64) -> Vec<AlignedSet> {
        (l.next_open_epoch()..=last)
            .map(|n| l.align_epoch(n).unwrap())
            .collect()
    }

    #[test]
    fn both_fresh() {
        let mut l = ledger(3);
        close_through(&mut l, 4);
        l.submit(U1, 5, counts(2, 1)).unwrap();
        l.submit(U2, 5, counts(3, 1)).unwrap();
        let set = l.align_epoch(5).unwrap();
        assert!(set.entries.values().all(|e| e.status == UnitStatus::Fresh));
        assert_eq!(set.entries[&U2].counts, counts(3, 1));
    }

    #[test]
    fn silent_unit_held_then_absent() {
        let mut l = ledger(3);
        close_through(&mut l, 3);
        l.submit(U1, 4, counts(2, 1)).unwrap();
        l.submit(U2, 4, counts(3, 2)).unwrap();
        l.align_epoch(4).unwrap();

        // unit 2 goes silent from epoch 5 onwards
        let mut seen = Vec::new();
        for n in 5..=9 {
            l.submit(U1, n, counts(2, 1)).unwrap();
            let set = l.align_epoch(n).unwrap();
            seen.push((set.entries[&U2].status, set.entries[&U2].counts.clone()));
        }
        assert_eq!(seen[0], (UnitStatus::Stale(1), counts(3, 2)));
        assert_eq!(seen[1], (UnitStatus::Stale(2), counts(3, 2)));
        assert_eq!(seen[2], (UnitStatus::Stale(3), counts(3, 2)));
        assert_eq!(seen[3], (UnitStatus::Absent, Counts::new()));
        assert_eq!(seen[4], (UnitStatus::Absent, Counts::new()));
    }

    #[test]
    fn never_reported_is_absent() {
        let mut l = ledger(3);
        let set = l.align_epoch(0).unwrap();
        assert!(set.entries.values().all(|e| e.status == UnitStatus::Absent));
        assert_eq!(set.entries.len(), 2);
    }

    #[test]
    fn late_and_duplicate() {
        let mut l = ledger(2);
        assert_eq!(l.submit(U1, 0, counts(2, 1)), Ok(AckStatus::Accepted));
        assert_eq!(l.submit(U1, 0, counts(2, 5)), Ok(AckStatus::Duplicate));
        let before = l.align_epoch(0).unwrap();
        assert_eq!(before.entries[&U1].counts, counts(2, 1));
        assert_eq!(l.submit(U2, 0, counts(3, 1)), Ok(AckStatus::Late));
        assert!(l.is_closed(0));
        assert_eq!(l.align_epoch(0), Err(LedgerError::OutOfOrder { requested: 0, next: 1 }));
        assert_eq!(
            l.submit(CompartmentId(9), 1, Counts::new()),
            Err(LedgerError::UnknownUnit(CompartmentId(9)))
        );
    }

    #[test]
    fn future_reports_wait_their_turn() {
        let mut l = ledger(3);
        l.submit(U1, 2, counts(2, 1)).unwrap();
        let first = l.align_epoch(0).unwrap();
        assert_eq!(first.entries[&U1].status, UnitStatus::Absent);
        l.align_epoch(1).unwrap();
        let third = l.align_epoch(2).unwrap();
        assert_eq!(third.entries[&U1].status, UnitStatus::Fresh);
    }

    #[test]
    fn clock_deadlines() {
        let c = EpochClock {
            origin_ms: 1_000,
            period_ms: 100,
            grace_ms: 30,
        };
        assert_eq!(c.slot_start(2), 1_200);
        assert_eq!(c.deadline(0), 1_130);
        assert!(!c.is_due(0, 1_129));
        assert!(c.is_due(0, 1_130));
    }
}
