//! In-enclave memory manager: the procmap mirror, the pre-reserved
//! private pool, partial emulation of mmap/munmap/mprotect/brk/msync,
//! two-copy file mappings with sync-back, and stash-based permission
//! change emulation.
//!
//! Hardware page permissions are frozen at init (R2), so the app's
//! logical permissions live here and are enforced in software on every
//! translated access.

use std::collections::BTreeMap;

use crate::abi::{self, PAGE_SIZE};
use crate::gisa::isa::{MemFault, MemFaultKind};
use crate::machine::{AccessKind, Accessor, Machine, MachineError, PageKind, Perms};
use crate::xlat::AddrXlat;

/// Engine + metadata region (the isolated region the app must never
/// reach). Placed at the base of the enclave span.
pub const REGION_A_SIZE: u64 = 1024 * 1024;

/// Metadata arena inside region_A (backed by real private pages).
pub const META_ARENA_OFF: u64 = 128 * 1024;
pub const META_ARENA_SIZE: u64 = 256 * 1024;

#[derive(Debug, Clone)]
pub struct MemCfg {
    pub pool_size: u64,
    pub stash_count: usize,
    pub stash_size: u64,
    pub heap_max: u64,
}

impl Default for MemCfg {
    fn default() -> Self {
        MemCfg {
            // Must cover the static heap reserve plus app segments,
            // stacks and mmap mirrors.
            pool_size: 32 * 1024 * 1024,
            stash_count: 8,
            stash_size: 256 * 1024,
            heap_max: abi::HEAP_MAX_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backing {
    Anon,
    File { path: String, offset: u64 },
    Heap,
    Seg,
}

#[derive(Debug, Clone)]
pub struct RegionRecord {
    pub len: u64,
    /// What the app believes the permissions are; enforced per access.
    pub logical: Perms,
    pub actual_va: u64,
    pub backing: Backing,
    pub public_twin: Option<u64>,
    /// Where this record's metadata conceptually lives (region_A).
    pub meta_va: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutReason {
    ZeroPage,
    EngineOverlap,
    Overlap,
    Misaligned,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemErr {
    #[error("layout rejected: {0:?}")]
    Layout(LayoutReason),
    #[error("reserved private pool exhausted")]
    OutOfReservedMemory,
    #[error("no free stash region large enough")]
    StashExhausted,
    #[error("range not fully mapped")]
    Unmapped,
    #[error(transparent)]
    Machine(#[from] MachineError),
}

#[derive(Debug, Clone)]
struct StashRegion {
    base: u64,
    size: u64,
    in_use: bool,
}

/// File-backed bytes that were just copied to their public twin and now
/// need flushing to the VFS by the host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncOut {
    pub twin_va: u64,
    pub len: u64,
    pub path: String,
    pub offset: u64,
}

pub struct MemManager {
    pub region_a: (u64, u64),
    pool_base: u64,
    pool_size: u64,
    pool_bump: u64,
    pool_free: Vec<(u64, u64)>,
    stash: Vec<StashRegion>,
    records: BTreeMap<u64, RegionRecord>,
    pub xlat: AddrXlat,
    meta_bump: u64,
    next_mmap_orig: u64,
    brk_top: u64,
    heap_mapped: u64,
    heap_actual: u64,
    heap_max: u64,
}

impl MemManager {
    /// Add the pool and stash pages to a pre-init enclave and set up the
    /// manager. Must run before einit (R2: no later additions).
    pub fn install(m: &mut Machine, cfg: &MemCfg) -> Result<MemManager, MemErr> {
        let base = m.cfg.enclave_base_va;
        let pool_base = base + REGION_A_SIZE;
        let stash_base = pool_base + cfg.pool_size;
        let total = REGION_A_SIZE + cfg.pool_size + cfg.stash_count as u64 * cfg.stash_size;
        if total > m.cfg.enclave_span {
            return Err(MemErr::Machine(MachineError::InvalidConfig(format!(
                "enclave span {:#x} too small for pool+stash {total:#x}",
                m.cfg.enclave_span
            ))));
        }
        // Metadata pages inside region_A: thread records, TLS segments,
        // lock-manager state. Real private pages so the host provably
        // cannot reach them.
        let mut va = base + META_ARENA_OFF;
        while va < base + META_ARENA_OFF + META_ARENA_SIZE {
            m.eadd_page(va, Perms::rw(), PageKind::Data, None)?;
            va += PAGE_SIZE;
        }
        let mut va = pool_base;
        while va < pool_base + cfg.pool_size {
            m.eadd_page(va, Perms::rw(), PageKind::Data, None)?;
            va += PAGE_SIZE;
        }
        let mut stash = Vec::new();
        for i in 0..cfg.stash_count {
            let sbase = stash_base + i as u64 * cfg.stash_size;
            let mut va = sbase;
            while va < sbase + cfg.stash_size {
                m.eadd_page(va, Perms::rwx(), PageKind::Stash, None)?;
                va += PAGE_SIZE;
            }
            stash.push(StashRegion { base: sbase, size: cfg.stash_size, in_use: false });
        }
        let mut mgr = MemManager {
            region_a: (base, REGION_A_SIZE),
            pool_base,
            pool_size: cfg.pool_size,
            pool_bump: pool_base,
            pool_free: Vec::new(),
            stash,
            records: BTreeMap::new(),
            xlat: AddrXlat::new(),
            meta_bump: base + META_ARENA_OFF,
            next_mmap_orig: abi::MMAP_ZONE_BASE,
            brk_top: abi::HEAP_BASE,
            heap_mapped: abi::HEAP_BASE,
            heap_actual: 0,
            heap_max: cfg.heap_max,
        };
        // Statically reserve the heap to its configured maximum.
        mgr.heap_actual = mgr.alloc_pool(m, abi::page_align_up(cfg.heap_max))?;
        Ok(mgr)
    }

    // --- pool ---

    fn alloc_pool(&mut self, m: &mut Machine, len: u64) -> Result<u64, MemErr> {
        let len = abi::page_align_up(len.max(1));
        if let Some(i) = self.pool_free.iter().position(|&(_, l)| l >= len) {
            let (base, l) = self.pool_free.remove(i);
            if l > len {
                self.pool_free.push((base + len, l - len));
            }
            zero_range(m, base, len)?;
            return Ok(base);
        }
        if self.pool_bump + len > self.pool_base + self.pool_size {
            return Err(MemErr::OutOfReservedMemory);
        }
        let base = self.pool_bump;
        self.pool_bump += len;
        Ok(base)
    }

    fn free_pool(&mut self, base: u64, len: u64) {
        self.pool_free.push((base, abi::page_align_up(len.max(1))));
    }

    fn in_pool(&self, va: u64) -> bool {
        va >= self.pool_base && va < self.pool_base + self.pool_size
    }

    fn stash_of(&self, va: u64) -> Option<usize> {
        self.stash.iter().position(|s| va >= s.base && va < s.base + s.size)
    }

    fn release_actual(&mut self, actual: u64, len: u64) {
        if self.in_pool(actual) {
            self.free_pool(actual, len);
        } else if let Some(i) = self.stash_of(actual) {
            let base = self.stash[i].base;
            let size = self.stash[i].size;
            let still_used = self
                .records
                .values()
                .any(|r| r.actual_va >= base && r.actual_va < base + size);
            if !still_used {
                self.stash[i].in_use = false;
            }
        }
    }

    fn next_meta(&mut self) -> u64 {
        self.meta_alloc(64)
    }

    /// Hand out region_A metadata storage (thread records, TLS segments,
    /// lock words). Real private pages; panics if the arena is exceeded,
    /// which would be an engine bug, not a guest condition.
    pub fn meta_alloc(&mut self, bytes: u64) -> u64 {
        let va = self.meta_bump;
        let bytes = (bytes + 7) & !7;
        assert!(
            va + bytes <= self.region_a.0 + META_ARENA_OFF + META_ARENA_SIZE,
            "metadata arena exhausted"
        );
        self.meta_bump += bytes;
        va
    }

    // --- mirror queries ---

    pub fn records(&self) -> impl Iterator<Item = (u64, &RegionRecord)> {
        self.records.iter().map(|(k, v)| (*k, v))
    }

    fn record_at(&self, orig: u64) -> Option<(u64, &RegionRecord)> {
        let (&s, r) = self.records.range(..=orig).next_back()?;
        if orig < s + r.len {
            Some((s, r))
        } else {
            None
        }
    }

    pub fn covered(&self, orig: u64, len: u64) -> bool {
        let mut va = orig;
        while va < orig + len {
            match self.record_at(va) {
                Some((s, r)) => va = s + r.len,
                None => return false,
            }
        }
        true
    }

    /// Candidate-range hygiene shared by the mmap path and the syscall
    /// return sanitizer.
    pub fn layout_check(&self, addr: u64, len: u64) -> Result<(), LayoutReason> {
        if addr == 0 || addr < PAGE_SIZE {
            return Err(LayoutReason::ZeroPage);
        }
        if !abi::is_page_aligned(addr) {
            return Err(LayoutReason::Misaligned);
        }
        let (a_base, a_len) = self.region_a;
        if addr < a_base + a_len && addr + len > a_base {
            return Err(LayoutReason::EngineOverlap);
        }
        for (s, r) in self.records() {
            if s < addr + len && s + r.len > addr {
                return Err(LayoutReason::Overlap);
            }
        }
        Ok(())
    }

    // --- access path ---

    /// Translate an app access: resolve orig → actual, enforcing logical
    /// permissions and engine isolation. Accesses must lie inside one
    /// record.
    pub fn check_app_access(&self, orig: u64, len: u64, kind: AccessKind) -> Result<u64, MemFault> {
        match self.record_at(orig) {
            Some((s, r)) => {
                if orig + len > s + r.len {
                    return Err(MemFault { va: orig, kind: MemFaultKind::Unmapped });
                }
                if !r.logical.allows(kind) {
                    return Err(MemFault { va: orig, kind: MemFaultKind::Perm });
                }
                Ok(r.actual_va + (orig - s))
            }
            None => {
                let (a_base, a_len) = self.region_a;
                let kind = if orig >= a_base && orig < a_base + a_len {
                    MemFaultKind::Isolation
                } else {
                    MemFaultKind::Unmapped
                };
                Err(MemFault { va: orig, kind })
            }
        }
    }

    // --- mapping ops ---

    /// Place a record at a caller-chosen original address (loader,
    /// stacks, signal stacks).
    pub fn map_fixed(
        &mut self,
        m: &mut Machine,
        orig: u64,
        len: u64,
        logical: Perms,
        backing: Backing,
        bytes: Option<(&[u8], u64)>, // (content, offset into region)
    ) -> Result<(), MemErr> {
        let len = abi::page_align_up(len);
        self.layout_check(orig, len).map_err(MemErr::Layout)?;
        let actual = self.alloc_pool(m, len)?;
        if let Some((content, off)) = bytes {
            m.write(Accessor::Engine, actual + off, content)?;
        }
        let meta_va = self.next_meta();
        self.records.insert(
            orig,
            RegionRecord { len, logical, actual_va: actual, backing, public_twin: None, meta_va },
        );
        self.xlat.insert(orig, len, actual).expect("records are disjoint");
        Ok(())
    }

    /// mmap after the host created the public region: allocate the
    /// app-visible address and the private mirror, copy twin content in.
    pub fn handle_mmap(
        &mut self,
        m: &mut Machine,
        len: u64,
        logical: Perms,
        backing: Backing,
        public_twin: Option<u64>,
    ) -> Result<u64, MemErr> {
        if len == 0 {
            return Err(MemErr::Layout(LayoutReason::Misaligned));
        }
        let len = abi::page_align_up(len);
        if self.next_mmap_orig + len > abi::MMAP_ZONE_BASE + abi::MMAP_ZONE_SIZE {
            return Err(MemErr::OutOfReservedMemory);
        }
        let orig = self.next_mmap_orig;
        self.layout_check(orig, len).map_err(MemErr::Layout)?;
        let actual = self.alloc_pool(m, len)?;
        if let Some(twin) = public_twin {
            copy_mem(m, twin, actual, len)?;
        }
        let meta_va = self.next_meta();
        self.records.insert(
            orig,
            RegionRecord { len, logical, actual_va: actual, backing, public_twin, meta_va },
        );
        self.xlat.insert(orig, len, actual).expect("records are disjoint");
        self.next_mmap_orig += len;
        Ok(orig)
    }

    fn split_record(&mut self, at: u64) {
        if let Some((s, r)) = self.record_at(at).map(|(s, r)| (s, r.clone())) {
            if s < at {
                let head = at - s;
                let tail = RegionRecord {
                    len: r.len - head,
                    logical: r.logical,
                    actual_va: r.actual_va + head,
                    backing: match &r.backing {
                        Backing::File { path, offset } => {
                            Backing::File { path: path.clone(), offset: offset + head }
                        }
                        b => b.clone(),
                    },
                    public_twin: r.public_twin.map(|t| t + head),
                    meta_va: self.next_meta(),
                };
                self.records.get_mut(&s).unwrap().len = head;
                self.records.insert(at, tail);
            }
        }
    }

    /// Unmap [orig, orig+len). File-backed parts are synced to their
    /// public twins first; the returned list tells the host what to
    /// flush to the VFS and which twins to free.
    pub fn handle_munmap(
        &mut self,
        m: &mut Machine,
        orig: u64,
        len: u64,
    ) -> Result<(Vec<SyncOut>, Vec<(u64, u64)>), MemErr> {
        if !abi::is_page_aligned(orig) || len == 0 {
            return Err(MemErr::Layout(LayoutReason::Misaligned));
        }
        let len = abi::page_align_up(len);
        self.split_record(orig);
        self.split_record(orig + len);
        let doomed: Vec<u64> = self.records.range(orig..orig + len).map(|(&s, _)| s).collect();
        let mut flush = Vec::new();
        let mut freed_twins = Vec::new();
        for s in doomed {
            let r = self.records.remove(&s).unwrap();
            if let (Backing::File { path, offset }, Some(twin)) = (&r.backing, r.public_twin) {
                copy_mem(m, r.actual_va, twin, r.len)?;
                flush.push(SyncOut { twin_va: twin, len: r.len, path: path.clone(), offset: *offset });
            }
            if let Some(twin) = r.public_twin {
                freed_twins.push((twin, r.len));
            }
            self.xlat.remove(s, r.len);
            self.release_actual(r.actual_va, r.len);
        }
        Ok((flush, freed_twins))
    }

    /// Permission change by relocation: copy the affected content into a
    /// free stash region, repoint the translation table, update logical
    /// perms. Hardware perms never change (R2).
    pub fn handle_mprotect(
        &mut self,
        m: &mut Machine,
        orig: u64,
        len: u64,
        new_perms: Perms,
    ) -> Result<(), MemErr> {
        if !abi::is_page_aligned(orig) || len == 0 {
            return Err(MemErr::Layout(LayoutReason::Misaligned));
        }
        let len = abi::page_align_up(len);
        if !self.covered(orig, len) {
            return Err(MemErr::Unmapped);
        }
        let stash_idx = self
            .stash
            .iter()
            .position(|s| !s.in_use && s.size >= len)
            .ok_or(MemErr::StashExhausted)?;
        let stash_base = self.stash[stash_idx].base;
        self.stash[stash_idx].in_use = true;
        self.split_record(orig);
        self.split_record(orig + len);
        let targets: Vec<u64> = self.records.range(orig..orig + len).map(|(&s, _)| s).collect();
        for s in targets {
            let (old_actual, rlen) = {
                let r = &self.records[&s];
                (r.actual_va, r.len)
            };
            let new_actual = stash_base + (s - orig);
            copy_mem(m, old_actual, new_actual, rlen)?;
            self.release_actual(old_actual, rlen);
            let r = self.records.get_mut(&s).unwrap();
            r.actual_va = new_actual;
            r.logical = new_perms;
            self.xlat.remap(s, rlen, new_actual);
        }
        Ok(())
    }

    /// Linux-style brk: returns the (possibly unchanged) current top.
    /// Growth stays inside the statically reserved heap range; no OS
    /// involvement, ever.
    pub fn handle_brk(&mut self, m: &mut Machine, new_top: u64) -> Result<u64, MemErr> {
        if new_top == 0
            || new_top < abi::HEAP_BASE
            || new_top > abi::HEAP_BASE + self.heap_max
        {
            return Ok(self.brk_top);
        }
        let want = abi::page_align_up(new_top);
        let have = self.heap_mapped;
        if want > have {
            // Fresh pages must read as zero even after shrink-regrow.
            zero_range(m, self.heap_actual + (have - abi::HEAP_BASE), want - have)?;
            self.set_heap_record(want);
        } else if want < have {
            self.set_heap_record(want);
        }
        self.heap_mapped = want;
        self.brk_top = new_top;
        Ok(self.brk_top)
    }

    fn set_heap_record(&mut self, mapped_top: u64) {
        self.records.remove(&abi::HEAP_BASE);
        self.xlat.remove(abi::HEAP_BASE, self.heap_max);
        let len = mapped_top - abi::HEAP_BASE;
        if len > 0 {
            let meta_va = self.next_meta();
            self.records.insert(
                abi::HEAP_BASE,
                RegionRecord {
                    len,
                    logical: Perms::rw(),
                    actual_va: self.heap_actual,
                    backing: Backing::Heap,
                    public_twin: None,
                    meta_va,
                },
            );
            self.xlat
                .insert(abi::HEAP_BASE, len, self.heap_actual)
                .expect("heap range is exclusive");
        }
    }

    /// Copy dirty file-backed content in [orig, orig+len) to the public
    /// twins. Caller hands the returned list to the host for VFS flush.
    pub fn sync_back_range(&mut self, m: &mut Machine, orig: u64, len: u64) -> Result<Vec<SyncOut>, MemErr> {
        let mut out = Vec::new();
        let work: Vec<(u64, RegionRecord)> = self
            .records
            .range(..orig + len)
            .filter(|(&s, r)| s + r.len > orig)
            .map(|(&s, r)| (s, r.clone()))
            .collect();
        for (s, r) in work {
            if let (Backing::File { path, offset }, Some(twin)) = (&r.backing, r.public_twin) {
                let lo = s.max(orig);
                let hi = (s + r.len).min(orig + len);
                if lo >= hi {
                    continue;
                }
                let d = lo - s;
                copy_mem(m, r.actual_va + d, twin + d, hi - lo)?;
                out.push(SyncOut {
                    twin_va: twin + d,
                    len: hi - lo,
                    path: path.clone(),
                    offset: offset + d,
                });
            }
        }
        Ok(out)
    }

    /// Same, keyed by backing file path (fsync on a mapped fd).
    pub fn sync_back_path(&mut self, m: &mut Machine, path: &str) -> Result<Vec<SyncOut>, MemErr> {
        let work: Vec<(u64, u64)> = self
            .records
            .iter()
            .filter(|(_, r)| matches!(&r.backing, Backing::File { path: p, .. } if p == path))
            .map(|(&s, r)| (s, r.len))
            .collect();
        let mut out = Vec::new();
        for (s, len) in work {
            out.extend(self.sync_back_range(m, s, len)?);
        }
        Ok(out)
    }

    pub fn brk_top(&self) -> u64 {
        self.brk_top
    }

    pub fn mmap_cursor(&self) -> u64 {
        self.next_mmap_orig
    }

    /// Text rendering of the mirror for the dump command and debugging.
    pub fn dump(&self) -> Vec<String> {
        self.records()
            .map(|(s, r)| {
                let kind = match &r.backing {
                    Backing::Anon => "anon".to_string(),
                    Backing::Heap => "heap".to_string(),
                    Backing::Seg => "seg".to_string(),
                    Backing::File { path, offset } => format!("file:{path}@{offset:#x}"),
                };
                format!(
                    "{:#x}..{:#x} {} {} -> {:#x}{}",
                    s,
                    s + r.len,
                    r.logical,
                    kind,
                    r.actual_va,
                    if r.public_twin.is_some() { " twin" } else { "" }
                )
            })
            .collect()
    }
}

fn zero_range(m: &mut Machine, va: u64, len: u64) -> Result<(), MachineError> {
    let zeros = [0u8; 4096];
    let mut done = 0;
    while done < len {
        let n = (len - done).min(4096);
        m.write(Accessor::Engine, va + done, &zeros[..n as usize])?;
        done += n;
    }
    Ok(())
}

fn copy_mem(m: &mut Machine, src: u64, dst: u64, len: u64) -> Result<(), MachineError> {
    let mut buf = [0u8; 4096];
    let mut done = 0;
    while done < len {
        let n = (len - done).min(4096) as usize;
        m.read(Accessor::Engine, src + done, &mut buf[..n])?;
        m.write(Accessor::Engine, dst + done, &buf[..n])?;
        done += n as u64;
    }
    Ok(())
}
