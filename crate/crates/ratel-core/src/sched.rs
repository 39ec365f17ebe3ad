//! Deterministic cooperative scheduler shared by the direct interpreter
//! and the in-enclave dispatch loop. Virtual threads are time-sliced at
//! retired-instruction granularity: a slice ends when `quantum` guest
//! instructions have retired or the running thread blocks. The next
//! runnable thread is chosen with a seeded RNG so that schedule sweeps
//! can vary while any single (seed, program) pair stays reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::Tid;

pub const DEFAULT_QUANTUM: u64 = 64;

pub struct Scheduler {
    rng: ChaCha8Rng,
    pub quantum: u64,
    slice_left: u64,
    pub current: Option<Tid>,
}

impl Scheduler {
    pub fn new(seed: u64, quantum: u64) -> Scheduler {
        Scheduler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            quantum: quantum.max(1),
            slice_left: 0,
            current: None,
        }
    }

    /// Account one retired instruction; returns true when the slice is
    /// used up and the driver should reschedule.
    pub fn on_retire(&mut self) -> bool {
        if self.slice_left > 0 {
            self.slice_left -= 1;
        }
        self.slice_left == 0
    }

    /// The running thread blocked or exited; force a pick on next step.
    pub fn deschedule(&mut self) {
        self.current = None;
        self.slice_left = 0;
    }

    /// Choose the next thread among `runnable` (must be sorted for
    /// determinism) and start a fresh slice.
    pub fn pick(&mut self, runnable: &[Tid]) -> Option<Tid> {
        if runnable.is_empty() {
            self.current = None;
            return None;
        }
        // Keep running the current thread only if it is the sole choice;
        // otherwise draw, which lets seeds explore interleavings.
        let choice = if runnable.len() == 1 {
            runnable[0]
        } else {
            runnable[self.rng.gen_range(0..runnable.len())]
        };
        self.current = Some(choice);
        self.slice_left = self.quantum;
        Some(choice)
    }
}
