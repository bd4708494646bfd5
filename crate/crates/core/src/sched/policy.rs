// SPDX-License-Identifier: Apache-2.0

/// What a thread does with its enclave context while it waits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleDecision {
    /// Keep the context and busy-wait; no transition is charged but the
    /// context stays occupied.
    SpinInside,
    /// Leave the enclave and sleep outside; charges an exit now and an
    /// entry when the thread resumes.
    ExitOutside,
}

/// Pick a wait strategy from the expected wait length.
///
/// Spinning only pays off while the wait is shorter than the two
/// transitions an exit/entry pair would cost; an exact tie or an unknown
/// wait sleeps outside.
pub fn decide(expected_wait: Option<u64>, cost_per_transition: u64) -> IdleDecision {
    match expected_wait {
        Some(w) if w < 2 * cost_per_transition => IdleDecision::SpinInside,
        _ => IdleDecision::ExitOutside,
    }
}

/// Exponentially weighted estimate of wait durations at one wait site.
#[derive(Debug, Default, Clone, Copy)]
pub struct WaitEstimator {
    ewma: u64,
    samples: u64,
}

impl WaitEstimator {
    /// Estimated wait, or `None` before the first observation.
    pub fn expected(&self) -> Option<u64> {
        (self.samples > 0).then_some(self.ewma)
    }

    pub fn record(&mut self, observed: u64) {
        if self.samples == 0 {
            self.ewma = observed;
        } else {
            self.ewma = (3 * self.ewma + observed) / 4;
        }
        self.samples += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_waits_spin_long_waits_exit() {
        let cpt = 5000;
        assert_eq!(decide(Some(0), cpt), IdleDecision::SpinInside);
        assert_eq!(decide(Some(9_999), cpt), IdleDecision::SpinInside);
        assert_eq!(decide(Some(10_001), cpt), IdleDecision::ExitOutside);
    }

    #[test]
    fn exact_breakeven_exits() {
        assert_eq!(decide(Some(10_000), 5000), IdleDecision::ExitOutside);
    }

    #[test]
    fn unknown_wait_exits() {
        assert_eq!(decide(None, 5000), IdleDecision::ExitOutside);
    }

    #[test]
    fn estimator_starts_empty_and_tracks_observations() {
        let mut e = WaitEstimator::default();
        assert_eq!(e.expected(), None);
        e.record(1000);
        assert_eq!(e.expected(), Some(1000));
        e.record(2000);
        assert_eq!(e.expected(), Some(1250));
        for _ in 0..50 {
            e.record(4000);
        }
        let settled = e.expected().unwrap();
        assert!(settled > 3800 && settled <= 4000);
    }
}
