//! Shared workout of the two-view memory layer: a randomized op
//! sequence checked against an independent interval model, the
//! permission matrix, and execution from relocated pages.

use std::collections::BTreeMap;

use super::{check_program, RunInputs};
use ratel_core::abi::{self, HEAP_BASE, MMAP_ZONE_BASE, PAGE_SIZE};
use ratel_core::gisa::asm::assemble;
use ratel_core::machine::{AccessKind, Accessor, Machine, MachineConfig, PageKind, Perms};
use ratel_core::memviews::{
    Backing, MemCfg, MemErr, MemManager, META_ARENA_OFF, META_ARENA_SIZE,
};

struct Rng(u64);
impl Rng {
    fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }
    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

pub fn setup() -> (Machine, MemManager, MemCfg) {
    let cfg = MachineConfig::default();
    let mem = MemCfg::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    let mv = MemManager::install(&mut m, &mem).unwrap();
    m.eadd_page(cfg.entry_va, Perms::rx(), PageKind::Code, Some(&[0u8; 16])).unwrap();
    let mut va = cfg.enclave_base_va + META_ARENA_OFF + META_ARENA_SIZE;
    for _ in 0..cfg.tcs_count {
        m.eadd_page(va, Perms::rw(), PageKind::Tcs, None).unwrap();
        va += PAGE_SIZE;
        for _ in 0..cfg.nssa {
            m.eadd_page(va, Perms::rw(), PageKind::Ssa, None).unwrap();
            va += PAGE_SIZE;
        }
    }
    m.einit().unwrap();
    m.eenter(0, cfg.entry_va).unwrap();
    (m, mv, mem)
}

#[derive(Clone)]
struct MRegion {
    perms: Perms,
    data: Vec<u8>,
}

/// App-address interval model: start -> region. Mirrors only what a
/// correct implementation must preserve (coverage, perms, content).
#[derive(Default)]
struct Model {
    regions: BTreeMap<u64, MRegion>,
}

impl Model {
    fn insert(&mut self, start: u64, perms: Perms, data: Vec<u8>) {
        self.regions.insert(start, MRegion { perms, data });
    }

    fn find(&self, va: u64) -> Option<(u64, &MRegion)> {
        self.regions
            .range(..=va)
            .next_back()
            .filter(|(&s, r)| va < s + r.data.len() as u64)
            .map(|(&s, r)| (s, r))
    }

    fn covered(&self, start: u64, len: u64) -> bool {
        let mut va = start;
        while va < start + len {
            match self.find(va) {
                Some((s, r)) => va = s + r.data.len() as u64,
                None => return false,
            }
        }
        true
    }

    /// Split so that `at` (if inside a region) becomes a region start.
    fn split(&mut self, at: u64) {
        if let Some((s, r)) = self.find(at).map(|(s, r)| (s, r.clone())) {
            if s < at {
                let head = (at - s) as usize;
                let tail = MRegion { perms: r.perms, data: r.data[head..].to_vec() };
                self.regions.get_mut(&s).unwrap().data.truncate(head);
                self.regions.insert(at, tail);
            }
        }
    }

    fn unmap(&mut self, start: u64, len: u64) {
        self.split(start);
        self.split(start + len);
        let doomed: Vec<u64> =
            self.regions.range(start..start + len).map(|(&s, _)| s).collect();
        for s in doomed {
            self.regions.remove(&s);
        }
    }

    fn protect(&mut self, start: u64, len: u64, perms: Perms) {
        self.split(start);
        self.split(start + len);
        let targets: Vec<u64> =
            self.regions.range(start..start + len).map(|(&s, _)| s).collect();
        for s in targets {
            self.regions.get_mut(&s).unwrap().perms = perms;
        }
    }

}

fn rand_perms(rng: &mut Rng) -> Perms {
    match rng.below(4) {
        0 => Perms::ro(),
        1 => Perms::rw(),
        2 => Perms::rx(),
        _ => Perms::rwx(),
    }
}

/// Read through the app view: translate, then read the private mirror.
fn view_read(m: &mut Machine, mv: &MemManager, va: u64, len: usize) -> Option<Vec<u8>> {
    let actual = mv.check_app_access(va, len as u64, AccessKind::Read).ok()?;
    let mut buf = vec![0u8; len];
    m.read(Accessor::Engine, actual, &mut buf).ok()?;
    Some(buf)
}

fn view_write(m: &mut Machine, mv: &MemManager, va: u64, bytes: &[u8]) -> bool {
    match mv.check_app_access(va, bytes.len() as u64, AccessKind::Write) {
        Ok(actual) => {
            m.write(Accessor::Engine, actual, bytes).unwrap();
            true
        }
        Err(_) => false,
    }
}

fn check_region(m: &mut Machine, mv: &MemManager, s: u64, r: &MRegion, rng: &mut Rng) {
    let len = r.data.len() as u64;
    // Perms agree on every access kind at a random 8-aligned offset.
    let off = rng.below(len / 8) * 8;
    for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Fetch] {
        let got = mv.check_app_access(s + off, 8, kind).is_ok();
        assert_eq!(got, r.perms.allows(kind), "perms mismatch at {s:#x}+{off:#x} {kind:?}");
    }
    // Content survives through the translation (even after relocation).
    if r.perms.allows(AccessKind::Read) {
        let got = view_read(m, mv, s + off, 8).expect("readable region");
        assert_eq!(got, r.data[off as usize..off as usize + 8], "content mismatch at {s:#x}+{off:#x}");
    }
}

pub fn fuzz_against_model(seed: u64, steps: usize) {
    let (mut m, mut mv, mem) = setup();
    let mut rng = Rng(seed | 1);
    let mut model = Model::default();
    // Heap modeled separately: Linux-style top plus zero-fill-on-grow.
    let mut heap_top = mv.brk_top();
    let mut heap_mapped = abi::page_align_up(heap_top);
    let mut heap_data = vec![0u8; mem.heap_max as usize];

    for step in 0..steps {
        match rng.below(100) {
            // mmap 1..=4 pages
            0..=34 => {
                let pages = 1 + rng.below(4);
                let len = pages * PAGE_SIZE;
                let perms = rand_perms(&mut rng);
                match mv.handle_mmap(&mut m, len, perms, Backing::Anon, None) {
                    Ok(orig) => {
                        let mut data = vec![0u8; len as usize];
                        if perms.allows(AccessKind::Write) {
                            for (i, b) in data.iter_mut().enumerate() {
                                *b = (orig as usize + i) as u8 ^ 0x5a;
                            }
                            assert!(view_write(&mut m, &mv, orig, &data));
                        }
                        model.insert(orig, perms, data);
                    }
                    Err(MemErr::OutOfReservedMemory) => {} // pool/zone pressure is legal
                    Err(e) => panic!("step {step}: unexpected mmap error {e}"),
                }
            }
            // munmap a subrange of an existing region, or a wild range
            35..=59 => {
                let starts: Vec<u64> = model.regions.keys().copied().collect();
                let (start, len) = if !starts.is_empty() && rng.below(8) != 0 {
                    let s = starts[rng.below(starts.len() as u64) as usize];
                    let rlen = model.regions[&s].data.len() as u64;
                    let off = rng.below(rlen / PAGE_SIZE) * PAGE_SIZE;
                    let pages = 1 + rng.below(rlen / PAGE_SIZE);
                    (s + off, pages * PAGE_SIZE)
                } else {
                    (MMAP_ZONE_BASE + rng.below(1024) * PAGE_SIZE, (1 + rng.below(4)) * PAGE_SIZE)
                };
                mv.handle_munmap(&mut m, start, len).expect("aligned munmap never errors");
                model.unmap(start, len);
            }
            // mprotect a covered subrange
            60..=79 => {
                let starts: Vec<u64> = model.regions.keys().copied().collect();
                if starts.is_empty() {
                    continue;
                }
                let s = starts[rng.below(starts.len() as u64) as usize];
                let rlen = model.regions[&s].data.len() as u64;
                let off = rng.below(rlen / PAGE_SIZE) * PAGE_SIZE;
                let len = (1 + rng.below((rlen - off) / PAGE_SIZE)) * PAGE_SIZE;
                let perms = rand_perms(&mut rng);
                let contiguous = model.covered(s + off, len);
                match mv.handle_mprotect(&mut m, s + off, len, perms) {
                    Ok(()) => {
                        assert!(contiguous, "step {step}: protect succeeded over a hole");
                        model.protect(s + off, len, perms);
                    }
                    Err(MemErr::Unmapped) => {
                        assert!(!contiguous, "step {step}: covered range reported unmapped");
                    }
                    Err(MemErr::StashExhausted) => {} // relocation slots busy: guest sees ENOMEM
                    Err(e) => panic!("step {step}: unexpected mprotect error {e}"),
                }
            }
            // brk moves, including out-of-range ones
            _ => {
                let target = match rng.below(4) {
                    0 => 0,
                    1 => HEAP_BASE.wrapping_sub(PAGE_SIZE),
                    2 => HEAP_BASE + mem.heap_max + PAGE_SIZE,
                    _ => HEAP_BASE + rng.below(mem.heap_max),
                };
                let got = mv.handle_brk(&mut m, target).unwrap();
                let expect = if target == 0
                    || target < HEAP_BASE
                    || target > HEAP_BASE + mem.heap_max
                {
                    heap_top
                } else {
                    let want = abi::page_align_up(target);
                    if want > heap_mapped {
                        for b in &mut heap_data
                            [(heap_mapped - HEAP_BASE) as usize..(want - HEAP_BASE) as usize]
                        {
                            *b = 0;
                        }
                    }
                    heap_mapped = want;
                    heap_top = target;
                    target
                };
                assert_eq!(got, expect, "step {step}: brk return");
                // Scribble into the live heap and remember it.
                if heap_mapped > HEAP_BASE {
                    let off = rng.below((heap_mapped - HEAP_BASE) / 8) * 8;
                    let word = rng.next().to_le_bytes();
                    assert!(view_write(&mut m, &mv, HEAP_BASE + off, &word));
                    heap_data[off as usize..off as usize + 8].copy_from_slice(&word);
                }
            }
        }

        // Spot checks every step: one random region, heap word, holes.
        let starts: Vec<u64> = model.regions.keys().copied().collect();
        if !starts.is_empty() {
            let s = starts[rng.below(starts.len() as u64) as usize];
            let r = model.regions[&s].clone();
            check_region(&mut m, &mv, s, &r, &mut rng);
        }
        if heap_mapped > HEAP_BASE {
            let off = rng.below((heap_mapped - HEAP_BASE) / 8) * 8;
            let got = view_read(&mut m, &mv, HEAP_BASE + off, 8).expect("heap readable");
            assert_eq!(got, heap_data[off as usize..off as usize + 8], "heap at +{off:#x}");
        }
        let hole = MMAP_ZONE_BASE + rng.below(abi::MMAP_ZONE_SIZE / PAGE_SIZE) * PAGE_SIZE;
        if !model.covered(hole, 8) {
            assert!(mv.check_app_access(hole, 8, AccessKind::Read).is_err());
        }
    }

    // Full sweep at the end: every byte of every surviving region.
    for (s, r) in model.regions.clone() {
        if r.perms.allows(AccessKind::Read) {
            let got = view_read(&mut m, &mv, s, r.data.len()).unwrap();
            assert_eq!(got, r.data, "final content sweep at {s:#x}");
        }
    }
    assert!(model.regions.len() > 4, "fuzz must end with live regions to sweep");
}

/// Each of the three base permission sets against each access kind.
pub fn perms_matrix() {
    let (mut m, mut mv, _) = setup();
    let cases = [Perms::ro(), Perms::rw(), Perms::rx()];
    for perms in cases {
        let orig = mv.handle_mmap(&mut m, PAGE_SIZE, perms, Backing::Anon, None).unwrap();
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Fetch] {
            assert_eq!(
                mv.check_app_access(orig, 8, kind).is_ok(),
                perms.allows(kind),
                "{perms:?} vs {kind:?}"
            );
        }
    }
}

/// Write code into an anonymous mapping, flip it executable (which
/// relocates the backing to a stash region), and jump into it. The
/// relocated copy must run, and the behavior must match the reference.
pub fn relocated_code_runs() {
    // Donor program supplies the encoded instruction words.
    let donor = assemble(
        "\
.code .at 0x11000
_start:
  movi g0, 14
  movi g1, 55
  sys
",
    )
    .unwrap();
    let code = &donor.segments.iter().find(|s| s.preferred_va == 0x11000).unwrap().bytes;
    assert_eq!(code.len(), 24);
    let words: Vec<u64> = code
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let src = format!(
        "\
.code .at 0x11000
_start:
  movi g0, 7        ; mmap(4096, rw, anon)
  movi g1, 0
  movi g2, 4096
  movi g3, 3
  movi g4, 1
  movi g5, 0
  movi g6, 0
  sys
  mov g10, g0
  movi g4, words    ; copy the three instruction words in
  ld g5, [g4+0]
  st [g10+0], g5
  ld g5, [g4+8]
  st [g10+8], g5
  ld g5, [g4+16]
  st [g10+16], g5
  movi g0, 9        ; mprotect(addr, 4096, r-x): relocates the backing
  mov g1, g10
  movi g2, 4096
  movi g3, 5
  sys
  movi g7, 8        ; push the target and ret into it
  sub g15, g7
  st [g15+0], g10
  ret
.data .at 0x20000
words: .quad {}, {}, {}
",
        words[0], words[1], words[2]
    );
    check_program("relocated code", &src, &RunInputs::new());
}
