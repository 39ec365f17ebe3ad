//! The modeled SGX-like machine: private (EPC) vs public memory, static
//! enclave layout, fixed entry points, TCS/SSA state, asynchronous exits,
//! and the hardware spinlock.
//!
//! The machine knows nothing about the translation engine running on it;
//! it only enforces the five hardware restrictions:
//!   R1 spatial partitioning, R2 static layout, R3 no sharing primitive,
//!   R4 1-to-1 frame/VA binding, R5 fixed entry points.

use std::collections::BTreeMap;

use crate::abi::{is_page_aligned, PAGE_SIZE};
use crate::gisa::GuestContext;

/// Base of the public (untrusted) memory arena.
pub const PUBLIC_BASE: u64 = 0x7000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub const fn rw() -> Self {
        Perms { r: true, w: true, x: false }
    }
    pub const fn rx() -> Self {
        Perms { r: true, w: false, x: true }
    }
    pub const fn rwx() -> Self {
        Perms { r: true, w: true, x: true }
    }
    pub const fn ro() -> Self {
        Perms { r: true, w: false, x: false }
    }
    pub const fn none() -> Self {
        Perms { r: false, w: false, x: false }
    }

    pub fn allows(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.r,
            AccessKind::Write => self.w,
            AccessKind::Fetch => self.x,
        }
    }

    pub fn from_prot(prot: u64) -> Self {
        Perms {
            r: prot & crate::abi::PROT_READ != 0,
            w: prot & crate::abi::PROT_WRITE != 0,
            x: prot & crate::abi::PROT_EXEC != 0,
        }
    }
}

impl std::fmt::Display for Perms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.r { 'r' } else { '-' },
            if self.w { 'w' } else { '-' },
            if self.x { 'x' } else { '-' }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageKind {
    Code,
    Data,
    Stack,
    Heap,
    Stash,
    Tcs,
    Ssa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accessor {
    Engine,
    App,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AexReason {
    Timer,
    Exception,
    Signal,
}

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub epc_size: u64,
    pub public_size: u64,
    pub nssa: usize,
    pub tcs_count: usize,
    pub entry_va: u64,
    pub enclave_base_va: u64,
    pub enclave_span: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            epc_size: 64 * 1024 * 1024,
            public_size: 16 * 1024 * 1024,
            nssa: 3,
            tcs_count: 4,
            entry_va: 0x1000_0000,
            enclave_base_va: 0x1000_0000,
            enclave_span: 64 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpcPage {
    pub frame_id: usize,
    pub bound_va: u64,
    pub perms: Perms,
    pub kind: PageKind,
}

#[derive(Debug, Clone)]
pub struct SsaFrame {
    pub saved_ctx: GuestContext,
    pub reason: AexReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcsState {
    Free,
    Busy,
}

#[derive(Debug)]
pub struct TcsSlot {
    pub id: usize,
    pub state: TcsState,
    pub ssa: Vec<SsaFrame>, // strict LIFO, len <= nssa
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PreInit,
    Initialized,
    Aborted,
}

#[derive(Debug, Clone, Copy)]
pub struct ModeState {
    pub in_enclave: bool,
    pub active_tcs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MachineError {
    #[error("invalid machine config: {0}")]
    InvalidConfig(String),
    #[error("layout mutation after enclave init")]
    PostInitMutation,
    #[error("double mapping at va {va:#x}")]
    DoubleMapFault { va: u64 },
    #[error("EPC exhausted")]
    OutOfEpc,
    #[error("incomplete enclave layout: {0}")]
    IncompleteLayout(String),
    #[error("entry attempted at {va:#x}, registered entry is {entry:#x}")]
    InvalidEntryFault { va: u64, entry: u64 },
    #[error("TCS slot {0} busy")]
    BusyTcs(usize),
    #[error("access fault: {who:?} {kind:?} at {va:#x}")]
    AccessFault { who: Accessor, kind: AccessKind, va: u64 },
    #[error("permission fault: {kind:?} at {va:#x} (page perms {perms})")]
    PermFault { kind: AccessKind, va: u64, perms: Perms },
    #[error("enclave aborted")]
    Aborted,
}

pub type MResult<T> = Result<T, MachineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AexOutcome {
    Saved,
    Aborted,
}

/// The machine. Holds byte storage for both private (EPC) and public
/// memory; every access is routed through `read`/`write`/`check_fetch`
/// so R1/R2 and page permissions apply uniformly.
pub struct Machine {
    pub cfg: MachineConfig,
    pub phase: Phase,
    pages: BTreeMap<u64, EpcPage>,
    frame_to_va: BTreeMap<usize, u64>,
    next_frame: usize,
    epc_data: Vec<u8>,
    public_data: Vec<u8>,
    pub tcs: Vec<TcsSlot>,
    pub mode: ModeState,
    /// Count of host writes that were attempted on private memory and
    /// correctly faulted. Audited by the adversary-containment tests.
    pub host_private_faults: u64,
}

impl Machine {
    /// ECREATE: validate the config and produce a pre-init enclave.
    pub fn ecreate(cfg: MachineConfig) -> MResult<Machine> {
        if cfg.epc_size == 0 || cfg.public_size == 0 {
            return Err(MachineError::InvalidConfig("zero memory size".into()));
        }
        if cfg.nssa < 1 || cfg.tcs_count < 1 {
            return Err(MachineError::InvalidConfig("nssa and tcs_count must be >= 1".into()));
        }
        if cfg.enclave_span == 0 || cfg.enclave_base_va.checked_add(cfg.enclave_span).is_none() {
            return Err(MachineError::InvalidConfig("enclave VA range wraps".into()));
        }
        if !is_page_aligned(cfg.enclave_base_va) || !is_page_aligned(cfg.enclave_span) {
            return Err(MachineError::InvalidConfig("enclave range not page aligned".into()));
        }
        if cfg.entry_va < cfg.enclave_base_va
            || cfg.entry_va >= cfg.enclave_base_va + cfg.enclave_span
        {
            return Err(MachineError::InvalidConfig("entry_va outside enclave span".into()));
        }
        let tcs = (0..cfg.tcs_count)
            .map(|id| TcsSlot { id, state: TcsState::Free, ssa: Vec::new() })
            .collect();
        Ok(Machine {
            epc_data: vec![0; cfg.epc_size as usize],
            public_data: vec![0; cfg.public_size as usize],
            cfg,
            phase: Phase::PreInit,
            pages: BTreeMap::new(),
            frame_to_va: BTreeMap::new(),
            next_frame: 0,
            tcs,
            mode: ModeState { in_enclave: false, active_tcs: None },
            host_private_faults: 0,
        })
    }

    pub fn is_private(&self, va: u64) -> bool {
        va >= self.cfg.enclave_base_va && va < self.cfg.enclave_base_va + self.cfg.enclave_span
    }

    pub fn is_public(&self, va: u64) -> bool {
        va >= PUBLIC_BASE && va < PUBLIC_BASE + self.cfg.public_size
    }

    /// EADD: bind a fresh EPC frame 1-to-1 to `va` (R4) with fixed
    /// permissions (R2). `content`, when given, is copied in at add time.
    pub fn eadd_page(
        &mut self,
        va: u64,
        perms: Perms,
        kind: PageKind,
        content: Option<&[u8]>,
    ) -> MResult<()> {
        if self.phase != Phase::PreInit {
            return Err(MachineError::PostInitMutation);
        }
        if !is_page_aligned(va) || !self.is_private(va) {
            return Err(MachineError::InvalidConfig(format!("bad page va {va:#x}")));
        }
        if self.pages.contains_key(&va) {
            return Err(MachineError::DoubleMapFault { va });
        }
        let frame_id = self.next_frame;
        if (frame_id as u64 + 1) * PAGE_SIZE > self.cfg.epc_size {
            return Err(MachineError::OutOfEpc);
        }
        debug_assert!(!self.frame_to_va.contains_key(&frame_id));
        self.next_frame += 1;
        if let Some(bytes) = content {
            assert!(bytes.len() <= PAGE_SIZE as usize);
            let off = frame_id * PAGE_SIZE as usize;
            self.epc_data[off..off + bytes.len()].copy_from_slice(bytes);
        }
        self.frame_to_va.insert(frame_id, va);
        self.pages.insert(va, EpcPage { frame_id, bound_va: va, perms, kind });
        Ok(())
    }

    /// EINIT: freeze the layout. Requires at least one code page and the
    /// configured number of TCS pages.
    pub fn einit(&mut self) -> MResult<()> {
        if self.phase != Phase::PreInit {
            return Err(MachineError::PostInitMutation);
        }
        let code = self.pages.values().filter(|p| p.kind == PageKind::Code).count();
        let tcs = self.pages.values().filter(|p| p.kind == PageKind::Tcs).count();
        let ssa = self.pages.values().filter(|p| p.kind == PageKind::Ssa).count();
        if code == 0 {
            return Err(MachineError::IncompleteLayout("no code pages".into()));
        }
        if tcs < self.cfg.tcs_count {
            return Err(MachineError::IncompleteLayout(format!(
                "need {} TCS pages, have {tcs}",
                self.cfg.tcs_count
            )));
        }
        if ssa < self.cfg.tcs_count * self.cfg.nssa {
            return Err(MachineError::IncompleteLayout(format!(
                "need {} SSA pages, have {ssa}",
                self.cfg.tcs_count * self.cfg.nssa
            )));
        }
        self.phase = Phase::Initialized;
        Ok(())
    }

    /// Hardware-level permission change. Always a fault after init (R2).
    pub fn set_page_perms(&mut self, va: u64, perms: Perms) -> MResult<()> {
        if self.phase != Phase::PreInit {
            return Err(MachineError::PostInitMutation);
        }
        match self.pages.get_mut(&page_base(va)) {
            Some(p) => {
                p.perms = perms;
                Ok(())
            }
            None => Err(MachineError::AccessFault { who: Accessor::Engine, kind: AccessKind::Write, va }),
        }
    }

    pub fn page(&self, va: u64) -> Option<&EpcPage> {
        self.pages.get(&page_base(va))
    }

    pub fn pages(&self) -> impl Iterator<Item = &EpcPage> {
        self.pages.values()
    }

    pub fn frames_used(&self) -> usize {
        self.next_frame
    }

    // --- Entry / exit (R5) ---

    /// EENTER at `requested_va`. Only the registered entry point is valid.
    pub fn eenter(&mut self, tcs: usize, requested_va: u64) -> MResult<()> {
        self.check_live()?;
        if requested_va != self.cfg.entry_va {
            return Err(MachineError::InvalidEntryFault { va: requested_va, entry: self.cfg.entry_va });
        }
        let slot = &mut self.tcs[tcs];
        if slot.state == TcsState::Busy {
            return Err(MachineError::BusyTcs(tcs));
        }
        slot.state = TcsState::Busy;
        self.mode.in_enclave = true;
        self.mode.active_tcs = Some(tcs);
        Ok(())
    }

    /// Asynchronous exit: push the interrupted context into an SSA frame,
    /// or abort the enclave when none is free.
    pub fn aex(&mut self, tcs: usize, reason: AexReason, ctx: GuestContext) -> AexOutcome {
        let slot = &mut self.tcs[tcs];
        if slot.ssa.len() >= self.cfg.nssa {
            self.abort();
            return AexOutcome::Aborted;
        }
        slot.ssa.push(SsaFrame { saved_ctx: ctx, reason });
        self.mode.in_enclave = false;
        AexOutcome::Saved
    }

    /// ERESUME: pop the most recent SSA frame and restore its context.
    pub fn eresume(&mut self, tcs: usize) -> MResult<GuestContext> {
        self.check_live()?;
        let slot = &mut self.tcs[tcs];
        let frame = slot
            .ssa
            .pop()
            .ok_or_else(|| MachineError::InvalidConfig("eresume with no saved frame".into()))?;
        self.mode.in_enclave = true;
        self.mode.active_tcs = Some(tcs);
        Ok(frame.saved_ctx)
    }

    /// Synchronous exit for an OCALL. No SSA frame involved; re-entry is
    /// a resume at the same point.
    pub fn exit_sync(&mut self) {
        self.mode.in_enclave = false;
    }

    pub fn resume_sync(&mut self) {
        self.mode.in_enclave = true;
    }

    /// Switch the active TCS between cooperative virtual threads.
    pub fn set_active_tcs(&mut self, tcs: Option<usize>) {
        self.mode.active_tcs = tcs;
    }

    pub fn tcs_release(&mut self, tcs: usize) {
        let slot = &mut self.tcs[tcs];
        slot.ssa.clear();
        slot.state = TcsState::Free;
        if self.mode.active_tcs == Some(tcs) {
            self.mode.active_tcs = None;
        }
    }

    pub fn free_tcs(&self) -> Option<usize> {
        self.tcs.iter().find(|s| s.state == TcsState::Free).map(|s| s.id)
    }

    pub fn abort(&mut self) {
        self.phase = Phase::Aborted;
        self.mode.in_enclave = false;
        self.mode.active_tcs = None;
    }

    fn check_live(&self) -> MResult<()> {
        match self.phase {
            Phase::Aborted => Err(MachineError::Aborted),
            Phase::PreInit => Err(MachineError::IncompleteLayout("enclave not initialized".into())),
            Phase::Initialized => Ok(()),
        }
    }

    // --- Memory access (R1 + page permissions) ---

    fn resolve(&mut self, who: Accessor, kind: AccessKind, va: u64, len: usize) -> MResult<(bool, usize)> {
        if len == 0 {
            return Ok((false, 0));
        }
        let end = va
            .checked_add(len as u64 - 1)
            .ok_or(MachineError::AccessFault { who, kind, va })?;
        if self.is_private(va) {
            if !self.is_private(end) {
                return Err(MachineError::AccessFault { who, kind, va });
            }
            if who == Accessor::Host {
                if kind == AccessKind::Write {
                    self.host_private_faults += 1;
                }
                return Err(MachineError::AccessFault { who, kind, va });
            }
            if !self.mode.in_enclave {
                return Err(MachineError::AccessFault { who, kind, va });
            }
            // All touched pages must be mapped with compatible perms.
            let mut p = page_base(va);
            while p <= end {
                match self.pages.get(&p) {
                    None => return Err(MachineError::AccessFault { who, kind, va: p }),
                    Some(page) if !page.perms.allows(kind) => {
                        return Err(MachineError::PermFault { kind, va: p, perms: page.perms })
                    }
                    _ => {}
                }
                p += PAGE_SIZE;
            }
            let off = self.epc_offset(va);
            Ok((true, off))
        } else if self.is_public(va) {
            if !self.is_public(end) {
                return Err(MachineError::AccessFault { who, kind, va });
            }
            if kind == AccessKind::Fetch && who != Accessor::Host {
                // Enclave code executes only from private memory.
                return Err(MachineError::AccessFault { who, kind, va });
            }
            Ok((false, (va - PUBLIC_BASE) as usize))
        } else {
            Err(MachineError::AccessFault { who, kind, va })
        }
    }

    /// Byte offset of a private VA in EPC storage, honoring the per-page
    /// frame binding (contiguous VAs may live in scattered frames).
    fn epc_offset(&self, va: u64) -> usize {
        let page = self.pages.get(&page_base(va)).expect("resolved page");
        page.frame_id * PAGE_SIZE as usize + (va - page.bound_va) as usize
    }

    pub fn read(&mut self, who: Accessor, va: u64, buf: &mut [u8]) -> MResult<()> {
        let len = buf.len();
        let (private, _) = self.resolve(who, AccessKind::Read, va, len)?;
        // Copy page by page in case frames are scattered.
        let mut done = 0usize;
        while done < len {
            let cur = va + done as u64;
            let in_page = (PAGE_SIZE - (cur & (PAGE_SIZE - 1))).min((len - done) as u64) as usize;
            let off = if private { self.epc_offset(cur) } else { (cur - PUBLIC_BASE) as usize };
            let src = if private { &self.epc_data } else { &self.public_data };
            buf[done..done + in_page].copy_from_slice(&src[off..off + in_page]);
            done += in_page;
        }
        Ok(())
    }

    pub fn write(&mut self, who: Accessor, va: u64, bytes: &[u8]) -> MResult<()> {
        let len = bytes.len();
        let (private, _) = self.resolve(who, AccessKind::Write, va, len)?;
        let mut done = 0usize;
        while done < len {
            let cur = va + done as u64;
            let in_page = (PAGE_SIZE - (cur & (PAGE_SIZE - 1))).min((len - done) as u64) as usize;
            let off = if private { self.epc_offset(cur) } else { (cur - PUBLIC_BASE) as usize };
            let dst = if private { &mut self.epc_data } else { &mut self.public_data };
            dst[off..off + in_page].copy_from_slice(&bytes[done..done + in_page]);
            done += in_page;
        }
        Ok(())
    }

    /// Permission-check an instruction fetch without moving bytes.
    pub fn check_fetch(&mut self, who: Accessor, va: u64, len: usize) -> MResult<()> {
        self.resolve(who, AccessKind::Fetch, va, len).map(|_| ())
    }

    pub fn read_u64(&mut self, who: Accessor, va: u64) -> MResult<u64> {
        let mut b = [0u8; 8];
        self.read(who, va, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, who: Accessor, va: u64, val: u64) -> MResult<()> {
        self.write(who, va, &val.to_le_bytes())
    }

    // --- Hardware spinlock (private words only) ---

    /// Single test-and-set attempt on a private lock word. Returns true
    /// when the lock was acquired. Callers spin by re-invoking from the
    /// scheduler loop.
    pub fn spinlock_try_acquire(&mut self, word_va: u64) -> MResult<bool> {
        if !self.is_private(word_va) {
            return Err(MachineError::AccessFault {
                who: Accessor::Engine,
                kind: AccessKind::Write,
                va: word_va,
            });
        }
        let cur = self.read_u64(Accessor::Engine, word_va)?;
        if cur == 0 {
            self.write_u64(Accessor::Engine, word_va, 1)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn spinlock_release(&mut self, word_va: u64) -> MResult<()> {
        if !self.is_private(word_va) {
            return Err(MachineError::AccessFault {
                who: Accessor::Engine,
                kind: AccessKind::Write,
                va: word_va,
            });
        }
        self.write_u64(Accessor::Engine, word_va, 0)
    }
}

fn page_base(va: u64) -> u64 {
    va & !(PAGE_SIZE - 1)
}
