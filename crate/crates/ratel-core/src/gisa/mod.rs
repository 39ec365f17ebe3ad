//! The GISA-64 guest ISA: instruction set, assembler, binary format and
//! the direct (non-enclave) reference interpreter.

pub mod asm;
pub mod binfmt;
pub mod interp;
pub mod isa;

pub use binfmt::{GuestBinary, SegKind, Segment};
pub use isa::{
    exec_instr, step, Bus, GuestContext, GuestFault, IllegalKind, Instr, MemFault, MemFaultKind,
    Outcome, INST_LEN,
};
