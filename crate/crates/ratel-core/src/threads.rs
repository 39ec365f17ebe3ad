//! Enclave thread management: per-thread records, the TCS pool with its
//! FIFO wait queue (more guest threads than TCS slots is fine — they
//! time-share), and per-thread TLS save-chains.
//!
//! A TLS chain is a linked list of at most three save records living in
//! the region_A metadata arena: the platform primary segment, the
//! engine's own segment, and the app's. Restoring thread-local state
//! always means taking the *last* element — the app's view — never the
//! head.

use std::collections::{BTreeMap, VecDeque};

use crate::gisa::isa::GuestContext;
use crate::machine::{Accessor, Machine, MachineError};
use crate::memviews::MemManager;
use crate::signals::Owner;
use crate::trace::Tid;

pub const TLS_MAX_SEGMENTS: usize = 3;
pub const TLS_SGX_PRIMARY: u64 = 1;
pub const TLS_ENGINE: u64 = 2;
pub const TLS_APP: u64 = 3;

/// Byte layout of one TLS save record in the metadata arena.
const TLS_REC_SIZE: u64 = 32;
const TLS_OFF_TAG: u64 = 0;
const TLS_OFF_SB0: u64 = 8;
const TLS_OFF_SB1: u64 = 16;
const TLS_OFF_NEXT: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VState {
    Runnable,
    FutexWait { addr: u64 },
    /// Ready to run but no TCS slot free yet.
    TcsWait,
    Done,
}

#[derive(Debug, Clone)]
pub struct VSigFrame {
    pub saved: GuestContext,
    pub record_va: u64,
    pub owner: Owner,
}

pub struct VThread {
    pub id: Tid,
    pub ctx: GuestContext,
    pub state: VState,
    pub retired: u64,
    pub ctid_va: u64,
    pub pending: VecDeque<u64>,
    pub frames: Vec<VSigFrame>,
    /// Assigned TCS slot, if currently occupying one.
    pub tcs: Option<usize>,
    /// Whether eenter has happened for the current TCS occupancy.
    pub entered: bool,
    tls_head: u64,
    tls_len: usize,
    /// Cached decode position: (block start pc, instr index, cache
    /// generation). Invalid whenever the generation moves on.
    pub cursor: Option<(u64, usize, u64)>,
}

impl VThread {
    fn new(id: Tid, ctx: GuestContext, ctid_va: u64) -> VThread {
        VThread {
            id,
            ctx,
            state: VState::Runnable,
            retired: 0,
            ctid_va,
            pending: VecDeque::new(),
            frames: Vec::new(),
            tcs: None,
            entered: false,
            tls_head: 0,
            tls_len: 0,
            cursor: None,
        }
    }

    pub fn runnable(&self) -> bool {
        self.state == VState::Runnable
    }

    pub fn tls_len(&self) -> usize {
        self.tls_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlsOverflow;

/// Push a save record onto the thread's TLS chain. At most three
/// segments may be stacked; a fourth registration is refused.
pub fn tls_push(
    m: &mut Machine,
    mv: &mut MemManager,
    th: &mut VThread,
    tag: u64,
    sb0: u64,
    sb1: u64,
) -> Result<(), TlsOverflow> {
    if th.tls_len >= TLS_MAX_SEGMENTS {
        return Err(TlsOverflow);
    }
    let rec = mv.meta_alloc(TLS_REC_SIZE);
    m.write_u64(Accessor::Engine, rec + TLS_OFF_TAG, tag).unwrap();
    m.write_u64(Accessor::Engine, rec + TLS_OFF_SB0, sb0).unwrap();
    m.write_u64(Accessor::Engine, rec + TLS_OFF_SB1, sb1).unwrap();
    m.write_u64(Accessor::Engine, rec + TLS_OFF_NEXT, 0).unwrap();
    if th.tls_head == 0 {
        th.tls_head = rec;
    } else {
        let mut cur = th.tls_head;
        loop {
            let next = m.read_u64(Accessor::Engine, cur + TLS_OFF_NEXT).unwrap();
            if next == 0 {
                break;
            }
            cur = next;
        }
        m.write_u64(Accessor::Engine, cur + TLS_OFF_NEXT, rec).unwrap();
    }
    th.tls_len += 1;
    Ok(())
}

/// Walk to the end of the chain and return (tag, sb0, sb1) of the last
/// record — the segment whose state the running app expects.
pub fn tls_restore(m: &mut Machine, th: &VThread) -> Option<(u64, u64, u64)> {
    if th.tls_head == 0 {
        return None;
    }
    let mut cur = th.tls_head;
    loop {
        let next = m.read_u64(Accessor::Engine, cur + TLS_OFF_NEXT).unwrap();
        if next == 0 {
            let tag = m.read_u64(Accessor::Engine, cur + TLS_OFF_TAG).unwrap();
            let sb0 = m.read_u64(Accessor::Engine, cur + TLS_OFF_SB0).unwrap();
            let sb1 = m.read_u64(Accessor::Engine, cur + TLS_OFF_SB1).unwrap();
            return Some((tag, sb0, sb1));
        }
        cur = next;
    }
}

pub struct ThreadSet {
    pub map: BTreeMap<Tid, VThread>,
    /// FIFO of threads waiting for a TCS slot.
    pub tcs_queue: VecDeque<Tid>,
    next_tid: Tid,
}

impl ThreadSet {
    pub fn new() -> ThreadSet {
        ThreadSet { map: BTreeMap::new(), tcs_queue: VecDeque::new(), next_tid: 1 }
    }

    pub fn spawn(&mut self, ctx: GuestContext, ctid_va: u64) -> Tid {
        let tid = self.next_tid;
        self.next_tid += 1;
        self.map.insert(tid, VThread::new(tid, ctx, ctid_va));
        tid
    }

    pub fn get(&self, tid: Tid) -> &VThread {
        &self.map[&tid]
    }

    pub fn get_mut(&mut self, tid: Tid) -> &mut VThread {
        self.map.get_mut(&tid).unwrap()
    }

    /// Threads currently holding a TCS slot. Must never exceed the
    /// machine's tcs_count.
    pub fn occupancy(&self) -> usize {
        self.map.values().filter(|t| t.tcs.is_some()).count()
    }

    pub fn slot_holders(&self) -> Vec<Tid> {
        self.map.iter().filter(|(_, t)| t.tcs.is_some()).map(|(&t, _)| t).collect()
    }

    /// First TCS slot neither Busy in hardware nor already claimed by a
    /// thread awaiting its first eenter.
    fn free_slot(&self, m: &Machine) -> Option<usize> {
        (0..m.cfg.tcs_count).find(|&s| {
            m.tcs[s].state == crate::machine::TcsState::Free
                && !self.map.values().any(|t| t.tcs == Some(s))
        })
    }

    /// Try to give `tid` a TCS slot; on exhaustion it joins the FIFO
    /// queue and blocks.
    pub fn acquire_tcs(&mut self, m: &Machine, tid: Tid) -> Option<usize> {
        match self.free_slot(m) {
            Some(slot) => {
                let th = self.get_mut(tid);
                th.tcs = Some(slot);
                Some(slot)
            }
            None => {
                let th = self.get_mut(tid);
                th.state = VState::TcsWait;
                self.tcs_queue.push_back(tid);
                None
            }
        }
    }

    /// Release `tid`'s slot and hand it to the first waiter in the same
    /// scheduling step, so the slot is never observed idle while the
    /// queue is non-empty. Returns the promoted thread, if any.
    pub fn release_tcs(&mut self, m: &mut Machine, tid: Tid) -> Result<Option<Tid>, MachineError> {
        let slot = match self.get_mut(tid).tcs.take() {
            Some(s) => s,
            None => return Ok(None),
        };
        self.get_mut(tid).entered = false;
        m.tcs_release(slot);
        if let Some(next) = self.tcs_queue.pop_front() {
            let th = self.get_mut(next);
            th.tcs = Some(slot);
            th.state = VState::Runnable;
            return Ok(Some(next));
        }
        Ok(None)
    }

    /// Back out a thread whose creation was rejected after spawn.
    pub fn remove(&mut self, tid: Tid) {
        self.map.remove(&tid);
    }

    pub fn all_done(&self) -> bool {
        self.map.values().all(|t| t.state == VState::Done)
    }

    pub fn runnable_tids(&self) -> Vec<Tid> {
        self.map.iter().filter(|(_, t)| t.runnable()).map(|(&t, _)| t).collect()
    }
}

impl Default for ThreadSet {
    fn default() -> Self {
        ThreadSet::new()
    }
}
