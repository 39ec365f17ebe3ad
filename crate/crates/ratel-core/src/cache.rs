//! Translated-code cache: basic blocks decoded from app code pages into
//! engine-private storage, a hard byte budget with flush-all eviction,
//! and optional trace (block-chain) formation for hot heads.
//!
//! Once blocks exist, app code bytes are never fetched again at dispatch
//! time — execution runs entirely from the cached copies.

use std::collections::BTreeMap;

use crate::gisa::isa::{Instr, MemFault, INST_LEN};

pub const DEFAULT_BB_MAX: u64 = 512 * 1024;
pub const DEFAULT_MAX_BB_INSTS: usize = 64;
pub const HOT_THRESHOLD: u32 = 16;
pub const DEFAULT_MAX_TRACE_BBS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// Jmp/Jz/Jnz/Call/Ret — next pc comes from executing the last instr.
    Branch,
    /// sys / rdtime / cpuinfo / wrsb0 / wrsb1 / sigret: control leaves
    /// the cache and enters the engine's service path.
    Stub,
    /// Hit max_bb_insts without a terminator; falls through to start+len.
    Fallthrough,
    /// Undecodable bytes at the end; executing past the last instruction
    /// raises a bad-opcode fault at that pc.
    BadOpcode,
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub start: u64,
    pub instrs: Vec<Instr>,
    pub term: Terminator,
}

impl BasicBlock {
    pub fn size_bytes(&self) -> u64 {
        // Modeled cost: one cache slot per guest instruction. The bad
        // terminator occupies a slot too (it is materialized as a stub).
        let n = self.instrs.len() as u64 + u64::from(self.term == Terminator::BadOpcode);
        n.max(1) * INST_LEN
    }

    pub fn end(&self) -> u64 {
        self.start + self.instrs.len() as u64 * INST_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheErr {
    /// A single block cannot fit in the configured budget at all.
    CacheTooSmall { need: u64, bb_max: u64 },
    Fetch(MemFault),
}

pub struct CodeCache {
    blocks: BTreeMap<u64, BasicBlock>,
    pub bytes_used: u64,
    pub peak_bytes: u64,
    pub bb_max: u64,
    pub max_bb_insts: usize,
    pub flushes: u64,
    /// Bumped on every flush; cursors and trace state from older
    /// generations are invalid.
    pub generation: u64,
    pub blocks_translated: u64,
    pub dispatches: u64,

    pub traces_enabled: bool,
    pub max_trace_bbs: usize,
    hot: BTreeMap<u64, u32>,
    traces: BTreeMap<u64, Vec<u64>>,
    recording: Option<Vec<u64>>,
    pub traces_formed: u64,
    pub trace_hits: u64,
}

impl CodeCache {
    pub fn new(bb_max: u64, max_bb_insts: usize, traces_enabled: bool, max_trace_bbs: usize) -> CodeCache {
        CodeCache {
            blocks: BTreeMap::new(),
            bytes_used: 0,
            peak_bytes: 0,
            bb_max,
            max_bb_insts,
            flushes: 0,
            generation: 0,
            blocks_translated: 0,
            dispatches: 0,
            traces_enabled,
            max_trace_bbs,
            hot: BTreeMap::new(),
            traces: BTreeMap::new(),
            recording: None,
            traces_formed: 0,
            trace_hits: 0,
        }
    }

    pub fn block(&self, start: u64) -> Option<&BasicBlock> {
        self.blocks.get(&start)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn trace_count(&self) -> usize {
        self.traces.len()
    }

    /// Decode a block starting at `pc`, reading code through `fetch`
    /// (which enforces logical execute permission).
    pub fn discover(
        &self,
        pc: u64,
        mut fetch: impl FnMut(u64) -> Result<[u8; 8], MemFault>,
    ) -> Result<BasicBlock, MemFault> {
        let mut instrs = Vec::new();
        let mut va = pc;
        loop {
            let bytes = match fetch(va) {
                Ok(b) => b,
                // Unfetchable bytes past a decodable prefix: end the
                // block here. Execution only faults if it actually
                // reaches this address (next dispatch re-fetches it).
                Err(_) if !instrs.is_empty() => {
                    return Ok(BasicBlock { start: pc, instrs, term: Terminator::Fallthrough });
                }
                Err(e) => return Err(e),
            };
            match Instr::decode(&bytes) {
                None => {
                    return Ok(BasicBlock { start: pc, instrs, term: Terminator::BadOpcode });
                }
                Some(i) => {
                    let stub = matches!(
                        i,
                        Instr::Sys
                            | Instr::Rdtime { .. }
                            | Instr::Cpuinfo { .. }
                            | Instr::Wrsb0 { .. }
                            | Instr::Wrsb1 { .. }
                            | Instr::Sigret
                    );
                    let term = i.is_block_terminator();
                    instrs.push(i);
                    if term {
                        let t = if stub { Terminator::Stub } else { Terminator::Branch };
                        return Ok(BasicBlock { start: pc, instrs, term: t });
                    }
                    if instrs.len() >= self.max_bb_insts {
                        return Ok(BasicBlock { start: pc, instrs, term: Terminator::Fallthrough });
                    }
                    va += INST_LEN;
                }
            }
        }
    }

    /// Look up `pc`, translating on miss. Eviction is flush-all: when the
    /// budget would be exceeded, everything (traces included) goes.
    pub fn ensure(
        &mut self,
        pc: u64,
        fetch: impl FnMut(u64) -> Result<[u8; 8], MemFault>,
    ) -> Result<&BasicBlock, CacheErr> {
        if !self.blocks.contains_key(&pc) {
            let bb = self.discover(pc, fetch).map_err(CacheErr::Fetch)?;
            let need = bb.size_bytes();
            if need > self.bb_max {
                return Err(CacheErr::CacheTooSmall { need, bb_max: self.bb_max });
            }
            if self.bytes_used + need > self.bb_max {
                self.flush_all();
            }
            self.bytes_used += need;
            self.peak_bytes = self.peak_bytes.max(self.bytes_used);
            self.blocks_translated += 1;
            self.blocks.insert(pc, bb);
            assert!(self.bytes_used <= self.bb_max, "code cache over budget");
        }
        Ok(&self.blocks[&pc])
    }

    pub fn flush_all(&mut self) {
        self.blocks.clear();
        self.bytes_used = 0;
        self.flushes += 1;
        self.generation += 1;
        // Traces chain into flushed blocks: severed wholesale.
        self.traces.clear();
        self.hot.clear();
        self.recording = None;
    }

    /// Called once per block-head dispatch. Drives hot-head counting and
    /// trace recording; returns the trace chain if `head` starts one.
    pub fn on_dispatch(&mut self, head: u64) -> Option<&[u64]> {
        self.dispatches += 1;
        if !self.traces_enabled {
            return None;
        }
        if let Some(rec) = &mut self.recording {
            rec.push(head);
            let ends_chain = self
                .blocks
                .get(&head)
                .map_or(true, |b| b.term == Terminator::Stub || b.term == Terminator::BadOpcode);
            if rec.len() >= self.max_trace_bbs || ends_chain {
                let chain = self.recording.take().unwrap();
                if chain.len() >= 2 {
                    self.traces.insert(chain[0], chain);
                    self.traces_formed += 1;
                }
            }
            return None;
        }
        if let Some(chain) = self.traces.get(&head) {
            self.trace_hits += 1;
            return Some(chain);
        }
        let c = self.hot.entry(head).or_insert(0);
        *c += 1;
        if *c == HOT_THRESHOLD {
            self.recording = Some(vec![head]);
        }
        None
    }
}
