use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const HISTORY_LEN: usize = 3;

/// Debounces noisy per-cycle stage predictions into a stage estimate that
/// moves at most one stage per call.
#[derive(Clone, Debug)]
pub struct StageTracker {
    current: usize,
    n_stages: usize,
    history: VecDeque<usize>,
}

impl StageTracker {
    pub fn new(n_stages: usize) -> Self {
        Self { current: 0, n_stages: n_stages.max(1), history: VecDeque::with_capacity(HISTORY_LEN + 1) }
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn history(&self) -> impl Iterator<Item = usize> + '_ {
        self.history.iter().copied()
    }

    pub fn reset(&mut self) {
        self.current = 0;
        self.history.clear();
    }

    /// Records a raw prediction and returns the (possibly updated) stage.
    ///
    /// Rules, first match wins:
    /// 1. at least two stored predictions name the next stage: advance;
    /// 2. a full buffer unanimously names the stage after next: advance by one;
    /// 3. a full buffer unanimously names the previous stage: step back.
    pub fn vote(&mut self, raw: usize) -> usize {
        self.history.push_back(raw);
        if self.history.len() > HISTORY_LEN {
            self.history.pop_front();
        }
        let cur = self.current;
        let full = self.history.len() == HISTORY_LEN;
        let count = |s: usize| self.history.iter().filter(|&&h| h == s).count();
        let target = if count(cur + 1) >= 2 {
            Some(cur + 1)
        } else if full && count(cur + 2) == HISTORY_LEN {
            Some(cur + 1)
        } else if cur > 0 && full && count(cur - 1) == HISTORY_LEN {
            Some(cur - 1)
        } else {
            None
        };
        if let Some(s) = target {
            let s = s.min(self.n_stages - 1);
            if s != cur {
                self.current = s;
                self.history.clear();
            }
        }
        self.current
    }
}

/// One line of the stage-event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub episode: usize,
    pub timestep: usize,
    pub raw: usize,
    pub stage: usize,
    pub transition: bool,
}

pub fn write_events<W: Write>(mut out: W, events: &[StageEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
