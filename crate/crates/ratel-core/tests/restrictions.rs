//! Negative tests for the five hardware restrictions the modeled
//! machine enforces. Every case expects the operation to be refused.

use ratel_core::machine::{
    AccessKind, Accessor, Machine, MachineConfig, MachineError, PageKind, Perms, TcsState,
};
use ratel_core::memviews::{MemCfg, MemManager, REGION_A_SIZE};

fn built_enclave() -> Machine {
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    let base = cfg.enclave_base_va;
    m.eadd_page(cfg.entry_va, Perms::rx(), PageKind::Code, Some(&[0u8; 16])).unwrap();
    let mut va = base + 0x100000;
    for _ in 0..cfg.tcs_count {
        m.eadd_page(va, Perms::rw(), PageKind::Tcs, None).unwrap();
        va += 4096;
        for _ in 0..cfg.nssa {
            m.eadd_page(va, Perms::rw(), PageKind::Ssa, None).unwrap();
            va += 4096;
        }
    }
    m.eadd_page(base + 0x200000, Perms::rw(), PageKind::Data, None).unwrap();
    m.einit().unwrap();
    m
}

// --- R1: spatial partitioning (private EPC vs public) ---

#[test]
fn r1_host_cannot_write_private() {
    let mut m = built_enclave();
    let before = m.host_private_faults;
    let err = m.write(Accessor::Host, m.cfg.enclave_base_va + 0x200000, &[1, 2, 3]);
    assert!(matches!(err, Err(MachineError::AccessFault { who: Accessor::Host, .. })));
    assert_eq!(m.host_private_faults, before + 1, "fault must be counted");
}

#[test]
fn r1_host_cannot_read_private() {
    let mut m = built_enclave();
    let mut buf = [0u8; 8];
    let err = m.read(Accessor::Host, m.cfg.enclave_base_va + 0x200000, &mut buf);
    assert!(matches!(err, Err(MachineError::AccessFault { who: Accessor::Host, .. })));
}

#[test]
fn r1_enclave_code_never_fetches_public() {
    let mut m = built_enclave();
    m.eenter(0, m.cfg.entry_va).unwrap();
    let pub_va = ratel_core::machine::PUBLIC_BASE + 0x1000;
    let err = m.check_fetch(Accessor::Engine, pub_va, 8);
    assert!(matches!(err, Err(MachineError::AccessFault { kind: AccessKind::Fetch, .. })));
    let err = m.check_fetch(Accessor::App, pub_va, 8);
    assert!(matches!(err, Err(MachineError::AccessFault { kind: AccessKind::Fetch, .. })));
}

#[test]
fn r1_private_access_requires_being_in_enclave() {
    let mut m = built_enclave();
    // Not entered: even the engine's accessor is outside the enclave.
    let err = m.read_u64(Accessor::Engine, m.cfg.enclave_base_va + 0x200000);
    assert!(matches!(err, Err(MachineError::AccessFault { .. })));
}

// --- R2: static layout, frozen permissions ---

#[test]
fn r2_no_page_additions_after_init() {
    let mut m = built_enclave();
    let err = m.eadd_page(m.cfg.enclave_base_va + 0x300000, Perms::rw(), PageKind::Data, None);
    assert_eq!(err, Err(MachineError::PostInitMutation));
}

#[test]
fn r2_no_permission_changes_after_init() {
    let mut m = built_enclave();
    let err = m.set_page_perms(m.cfg.enclave_base_va + 0x200000, Perms::rwx());
    assert_eq!(err, Err(MachineError::PostInitMutation));
    // Not even a downgrade.
    let err = m.set_page_perms(m.cfg.entry_va, Perms::ro());
    assert_eq!(err, Err(MachineError::PostInitMutation));
}

#[test]
fn r2_write_to_executable_page_faults() {
    let mut m = built_enclave();
    m.eenter(0, m.cfg.entry_va).unwrap();
    let err = m.write(Accessor::Engine, m.cfg.entry_va, &[0u8; 8]);
    assert!(matches!(err, Err(MachineError::PermFault { kind: AccessKind::Write, .. })));
}

// --- R3: no sharing primitive between trust domains ---

#[test]
fn r3_private_page_unreachable_from_host_even_while_enclave_runs() {
    let mut m = built_enclave();
    m.eenter(0, m.cfg.entry_va).unwrap();
    // The enclave being live changes nothing for the host.
    let err = m.write_u64(Accessor::Host, m.cfg.enclave_base_va + 0x200000, 7);
    assert!(matches!(err, Err(MachineError::AccessFault { who: Accessor::Host, .. })));
    let mut b = [0u8; 4];
    let err = m.read(Accessor::Host, m.cfg.entry_va, &mut b);
    assert!(matches!(err, Err(MachineError::AccessFault { who: Accessor::Host, .. })));
}

#[test]
fn r3_app_cannot_reach_engine_private_region() {
    // Inside the enclave, the engine's own region is still fenced off
    // from translated app code: no sharing of engine state either.
    let mut m = Machine::ecreate(MachineConfig::default()).unwrap();
    let mv = MemManager::install(&mut m, &MemCfg::default()).unwrap();
    let base = m.cfg.enclave_base_va;
    for probe in [base, base + 0x20000, base + REGION_A_SIZE - 4096] {
        assert!(
            mv.check_app_access(probe, 8, AccessKind::Read).is_err(),
            "app read into engine region at {probe:#x} must be refused"
        );
        assert!(
            mv.check_app_access(probe, 8, AccessKind::Write).is_err(),
            "app write into engine region at {probe:#x} must be refused"
        );
    }
}

// --- R4: one frame, one VA ---

#[test]
fn r4_double_mapping_a_va_faults() {
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    let va = cfg.enclave_base_va + 0x5000;
    m.eadd_page(va, Perms::rw(), PageKind::Data, None).unwrap();
    let err = m.eadd_page(va, Perms::rw(), PageKind::Data, None);
    assert_eq!(err, Err(MachineError::DoubleMapFault { va }));
}

#[test]
fn r4_frames_bind_injectively() {
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    let mut vas = Vec::new();
    for i in 0..8u64 {
        let va = cfg.enclave_base_va + 0x10000 + i * 4096;
        m.eadd_page(va, Perms::rw(), PageKind::Data, None).unwrap();
        vas.push(va);
    }
    let mut seen = std::collections::BTreeSet::new();
    for va in vas {
        let page = m.page(va).unwrap();
        assert_eq!(page.bound_va, va);
        assert!(seen.insert(page.frame_id), "frame {} bound twice", page.frame_id);
    }
}

#[test]
fn r4_unaligned_or_foreign_va_rejected() {
    let cfg = MachineConfig::default();
    let mut m = Machine::ecreate(cfg.clone()).unwrap();
    assert!(m.eadd_page(cfg.enclave_base_va + 123, Perms::rw(), PageKind::Data, None).is_err());
    assert!(m.eadd_page(0x1000, Perms::rw(), PageKind::Data, None).is_err());
}

// --- R5: fixed entry point ---

#[test]
fn r5_entry_anywhere_but_the_registered_point_faults() {
    let mut m = built_enclave();
    // A mapped, executable address that is not the entry point.
    let err = m.eenter(0, m.cfg.entry_va + 8);
    assert!(matches!(err, Err(MachineError::InvalidEntryFault { .. })));
    // A data page.
    let err = m.eenter(0, m.cfg.enclave_base_va + 0x200000);
    assert!(matches!(err, Err(MachineError::InvalidEntryFault { .. })));
    assert_eq!(m.tcs[0].state, TcsState::Free, "failed entry must not claim the slot");
}

#[test]
fn r5_busy_tcs_refuses_reentry() {
    let mut m = built_enclave();
    m.eenter(0, m.cfg.entry_va).unwrap();
    let err = m.eenter(0, m.cfg.entry_va);
    assert_eq!(err, Err(MachineError::BusyTcs(0)));
}
