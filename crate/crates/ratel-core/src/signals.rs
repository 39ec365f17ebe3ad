//! Signal virtualization policy. The modeled hardware accepts exactly
//! one primary handler (the engine's fixed entry path); every guest or
//! engine handler is a *secondary* registration kept in this table, and
//! nesting decisions are made here before the engine touches any state.
//!
//! Secondary handlers are tagged with their owner. When a signal arrives
//! while another is being handled, only one combination may nest: an
//! app-owned signal interrupting an engine-owned handler. Every other
//! combination is dropped, and synchronous faults past the nesting limit
//! abort the enclave (a fault inside a fault handler cannot be ignored —
//! it would immediately re-trigger).

use crate::abi;

pub const MAX_SIG_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Engine,
    App,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Deliver,
    Ignore,
    Fatal,
    Abort,
}

impl Decision {
    pub fn disposition(self) -> &'static str {
        match self {
            Decision::Deliver => "delivered",
            Decision::Ignore => "ignored",
            Decision::Fatal => "fatal",
            Decision::Abort => "abort",
        }
    }
}

pub struct SignalVirt {
    /// Indexed by signum 1..=8; slot 0 unused.
    secondary: [Option<(Owner, u64)>; 9],
    /// How many handlers the modeled hardware itself knows about. Fixed
    /// at one: the engine entry path. Never grows.
    pub primary_registrations: u64,
    pub delivered: u64,
    pub ignored: u64,
    pub fatal: u64,
    pub aborted: u64,
}

impl SignalVirt {
    pub fn new() -> SignalVirt {
        SignalVirt {
            secondary: [None; 9],
            primary_registrations: 1,
            delivered: 0,
            ignored: 0,
            fatal: 0,
            aborted: 0,
        }
    }

    /// Register (or clear, handler 0) a secondary handler. Returns the
    /// previous handler pc, 0 if none.
    pub fn register_secondary(&mut self, signum: u64, owner: Owner, handler: u64) -> Option<u64> {
        if signum == 0 || signum > 8 {
            return None;
        }
        let prev = self.secondary[signum as usize].map_or(0, |(_, h)| h);
        self.secondary[signum as usize] =
            if handler == 0 { None } else { Some((owner, handler)) };
        Some(prev)
    }

    pub fn handler(&self, signum: u64) -> Option<(Owner, u64)> {
        if signum == 0 || signum > 8 {
            None
        } else {
            self.secondary[signum as usize]
        }
    }

    /// Nesting/default policy. `top` is the owner of the handler frame
    /// currently executing (None at depth 0); `sync` marks signals raised
    /// by the faulting instruction itself.
    pub fn decide(&self, signum: u64, sync: bool, depth: usize, top: Option<Owner>) -> Decision {
        // Async arrivals during a handler are dropped before handler
        // presence even matters — except the one permitted nesting, an
        // app signal interrupting an engine-owned handler.
        if !sync && depth > 0 {
            return match (top, self.handler(signum)) {
                (Some(Owner::Engine), Some((Owner::App, _))) => Decision::Deliver,
                _ => Decision::Ignore,
            };
        }
        if self.handler(signum).is_none() {
            return if signum == abi::SIG_CHLD || signum == abi::SIG_ALRM {
                Decision::Ignore
            } else {
                Decision::Fatal
            };
        }
        if sync && depth >= MAX_SIG_DEPTH {
            // Can't drop a synchronous fault: re-execution re-faults.
            return Decision::Abort;
        }
        Decision::Deliver
    }

    pub fn count(&mut self, d: Decision) {
        match d {
            Decision::Deliver => self.delivered += 1,
            Decision::Ignore => self.ignored += 1,
            Decision::Fatal => self.fatal += 1,
            Decision::Abort => self.aborted += 1,
        }
    }
}

impl Default for SignalVirt {
    fn default() -> Self {
        SignalVirt::new()
    }
}
