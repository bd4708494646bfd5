// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeSet, HashMap};

pub const PAGE_SIZE: u64 = 4096;

/// Counts of page touches observed by the paging model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PagingStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl PagingStats {
    pub fn touches(&self) -> u64 {
        self.hits + self.misses
    }
}

/// LRU model of the enclave page cache.
///
/// The cache holds at most `capacity` pages. Touching a resident page is a
/// hit and refreshes its recency; touching a non-resident page is a miss,
/// evicting the least recently used page once the cache is full. Capacity
/// zero means every touch misses and nothing is ever resident.
#[derive(Debug)]
pub struct PagingModel {
    capacity: usize,
    resident: HashMap<u64, u64>,
    lru: BTreeSet<(u64, u64)>,
    next_stamp: u64,
    stats: PagingStats,
}

impl PagingModel {
    /// Model a cache of `epc_limit` bytes, rounded down to whole pages.
    pub fn new(epc_limit: u64) -> Self {
        PagingModel {
            capacity: (epc_limit / PAGE_SIZE) as usize,
            resident: HashMap::new(),
            lru: BTreeSet::new(),
            next_stamp: 0,
            stats: PagingStats::default(),
        }
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity
    }

    pub fn resident_pages(&self) -> usize {
        self.resident.len()
    }

    pub fn stats(&self) -> PagingStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = PagingStats::default();
    }

    /// Touch one page; returns true on a hit.
    pub fn touch(&mut self, page: u64) -> bool {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        if let Some(&old) = self.resident.get(&page) {
            self.lru.remove(&(old, page));
            self.lru.insert((stamp, page));
            self.resident.insert(page, stamp);
            self.stats.hits += 1;
            return true;
        }
        self.stats.misses += 1;
        if self.capacity == 0 {
            return false;
        }
        if self.resident.len() == self.capacity {
            let &(victim_stamp, victim) = self.lru.iter().next().expect("full cache has entries");
            self.lru.remove(&(victim_stamp, victim));
            self.resident.remove(&victim);
            self.stats.evictions += 1;
        }
        self.resident.insert(page, stamp);
        self.lru.insert((stamp, page));
        false
    }

    /// Drop all residency, keeping accumulated stats.
    pub fn clear(&mut self) {
        self.resident.clear();
        self.lru.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line reference: a recency list walked with linear scans.
    struct NaiveLru {
        capacity: usize,
        order: Vec<u64>,
    }

    impl NaiveLru {
        fn new(capacity: usize) -> Self {
            NaiveLru {
                capacity,
                order: Vec::new(),
            }
        }

        fn touch(&mut self, page: u64) -> bool {
            if let Some(pos) = self.order.iter().position(|&p| p == page) {
                self.order.remove(pos);
                self.order.push(page);
                return true;
            }
            if self.capacity > 0 {
                if self.order.len() == self.capacity {
                    self.order.remove(0);
                }
                self.order.push(page);
            }
            false
        }
    }

    #[test]
    fn repeated_touch_within_capacity_hits() {
        let mut m = PagingModel::new(4 * PAGE_SIZE);
        for p in 0..4 {
            assert!(!m.touch(p));
        }
        for _ in 0..3 {
            for p in 0..4 {
                assert!(m.touch(p));
            }
        }
        assert_eq!(
            m.stats(),
            PagingStats {
                hits: 12,
                misses: 4,
                evictions: 0
            }
        );
    }

    #[test]
    fn cycling_one_past_capacity_always_misses() {
        // Touching 0..=4 round-robin with room for 4 pages evicts the very
        // page that is needed next, so after warmup every touch misses.
        let mut m = PagingModel::new(4 * PAGE_SIZE);
        for p in 0..5 {
            assert!(!m.touch(p));
        }
        m.reset_stats();
        for _ in 0..10 {
            for p in 0..5 {
                assert!(!m.touch(p));
            }
        }
        assert_eq!(m.stats().misses, 50);
        assert_eq!(m.stats().hits, 0);
    }

    #[test]
    fn sixteen_page_cycle_matches_hand_walk() {
        // Hand-walked: cap 16, touch 0..16 (16 misses), then 0..16 again
        // (16 hits), then page 16 (miss, evicts 0), then 0 (miss, evicts 1).
        let mut m = PagingModel::new(16 * PAGE_SIZE);
        for p in 0..16 {
            assert!(!m.touch(p));
        }
        for p in 0..16 {
            assert!(m.touch(p));
        }
        assert!(!m.touch(16));
        assert!(!m.touch(0));
        assert_eq!(
            m.stats(),
            PagingStats {
                hits: 16,
                misses: 18,
                evictions: 2
            }
        );
        assert_eq!(m.resident_pages(), 16);
    }

    #[test]
    fn zero_capacity_never_holds_pages() {
        let mut m = PagingModel::new(PAGE_SIZE - 1);
        assert_eq!(m.capacity_pages(), 0);
        for _ in 0..5 {
            assert!(!m.touch(7));
        }
        assert_eq!(m.resident_pages(), 0);
        assert_eq!(m.stats().misses, 5);
    }

    #[test]
    fn clear_drops_residency_but_keeps_stats() {
        let mut m = PagingModel::new(4 * PAGE_SIZE);
        m.touch(1);
        m.touch(2);
        m.clear();
        assert_eq!(m.resident_pages(), 0);
        assert_eq!(m.stats().misses, 2);
        assert!(!m.touch(1));
    }

    proptest! {
        #[test]
        fn matches_naive_reference(
            cap in 0usize..9,
            seq in proptest::collection::vec(0u64..12, 0..200),
        ) {
            let mut model = PagingModel::new(cap as u64 * PAGE_SIZE);
            let mut naive = NaiveLru::new(cap);
            for &p in &seq {
                prop_assert_eq!(model.touch(p), naive.touch(p));
                prop_assert!(model.resident_pages() <= cap);
            }
            prop_assert_eq!(model.resident_pages(), naive.order.len());
        }

        #[test]
        fn hits_plus_misses_equals_touches(
            cap in 1usize..6,
            seq in proptest::collection::vec(0u64..10, 1..100),
        ) {
            let mut model = PagingModel::new(cap as u64 * PAGE_SIZE);
            for &p in &seq {
                model.touch(p);
            }
            prop_assert_eq!(model.stats().touches(), seq.len() as u64);
        }
    }
}
