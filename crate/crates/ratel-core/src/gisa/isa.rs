//! GISA-64: a deterministic fixed-width guest ISA.
//!
//! Every instruction encodes to exactly 8 bytes:
//! `[opcode][ra | rb<<4][imm48 little-endian, sign-extended]`.
//!
//! `sys`, `rdtime`, `cpuinfo`, `wrsb0`, `wrsb1` and `sigret` are surfaced
//! to the driving loop rather than executed here, so the direct
//! interpreter and the translation engine can give them their own
//! meanings (serve directly vs. delegate/virtualize).

pub const INST_LEN: u64 = 8;

/// Per-thread register state. g15 is the stack pointer by convention;
/// sb0/sb1 are the two segment-base registers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GuestContext {
    pub pc: u64,
    pub g: [u64; 16],
    pub sb0: u64,
    pub sb1: u64,
    pub zf: bool,
}

impl GuestContext {
    pub fn sp(&self) -> u64 {
        self.g[15]
    }
    pub fn set_sp(&mut self, v: u64) {
        self.g[15] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Nop,
    Movi { rd: u8, imm: i64 },
    Mov { rd: u8, rs: u8 },
    Add { rd: u8, rs: u8 },
    Sub { rd: u8, rs: u8 },
    Mul { rd: u8, rs: u8 },
    Div { rd: u8, rs: u8 },
    And { rd: u8, rs: u8 },
    Or { rd: u8, rs: u8 },
    Xor { rd: u8, rs: u8 },
    Cmp { ra: u8, rb: u8 },
    Ld { rd: u8, rs: u8, off: i64 },
    St { rd: u8, rs: u8, off: i64 }, // mem[rd+off] = rs
    Ldb { rd: u8, rs: u8, off: i64 },
    Stb { rd: u8, rs: u8, off: i64 },
    Jmp { target: u64 },
    Jz { target: u64 },
    Jnz { target: u64 },
    Call { target: u64 },
    Ret,
    Sys,
    Rdtime { rd: u8 },
    Cpuinfo { rd: u8 },
    Rdsb0 { rd: u8 },
    Rdsb1 { rd: u8 },
    Wrsb0 { rs: u8 },
    Wrsb1 { rs: u8 },
    Sigret,
}

mod op {
    pub const NOP: u8 = 0;
    pub const MOVI: u8 = 1;
    pub const MOV: u8 = 2;
    pub const ADD: u8 = 3;
    pub const SUB: u8 = 4;
    pub const MUL: u8 = 5;
    pub const DIV: u8 = 6;
    pub const AND: u8 = 7;
    pub const OR: u8 = 8;
    pub const XOR: u8 = 9;
    pub const CMP: u8 = 10;
    pub const LD: u8 = 11;
    pub const ST: u8 = 12;
    pub const LDB: u8 = 13;
    pub const STB: u8 = 14;
    pub const JMP: u8 = 15;
    pub const JZ: u8 = 16;
    pub const JNZ: u8 = 17;
    pub const CALL: u8 = 18;
    pub const RET: u8 = 19;
    pub const SYS: u8 = 20;
    pub const RDTIME: u8 = 21;
    pub const CPUINFO: u8 = 22;
    pub const RDSB0: u8 = 23;
    pub const RDSB1: u8 = 24;
    pub const WRSB0: u8 = 25;
    pub const WRSB1: u8 = 26;
    pub const SIGRET: u8 = 27;
}

pub const IMM48_MIN: i64 = -(1 << 47);
pub const IMM48_MAX: i64 = (1 << 47) - 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("immediate {0} does not fit in 48 bits")]
    ImmOutOfRange(i64),
}

fn imm48(imm: i64) -> Result<[u8; 6], EncodeError> {
    if !(IMM48_MIN..=IMM48_MAX).contains(&imm) {
        return Err(EncodeError::ImmOutOfRange(imm));
    }
    let b = imm.to_le_bytes();
    Ok([b[0], b[1], b[2], b[3], b[4], b[5]])
}

fn sext48(b: &[u8]) -> i64 {
    let mut v = [0u8; 8];
    v[..6].copy_from_slice(&b[..6]);
    let fill = if b[5] & 0x80 != 0 { 0xff } else { 0 };
    v[6] = fill;
    v[7] = fill;
    i64::from_le_bytes(v)
}

impl Instr {
    pub fn encode(&self) -> Result<[u8; 8], EncodeError> {
        use Instr::*;
        let (opc, regs, imm): (u8, u8, i64) = match *self {
            Nop => (op::NOP, 0, 0),
            Movi { rd, imm } => (op::MOVI, rd, imm),
            Mov { rd, rs } => (op::MOV, rd | rs << 4, 0),
            Add { rd, rs } => (op::ADD, rd | rs << 4, 0),
            Sub { rd, rs } => (op::SUB, rd | rs << 4, 0),
            Mul { rd, rs } => (op::MUL, rd | rs << 4, 0),
            Div { rd, rs } => (op::DIV, rd | rs << 4, 0),
            And { rd, rs } => (op::AND, rd | rs << 4, 0),
            Or { rd, rs } => (op::OR, rd | rs << 4, 0),
            Xor { rd, rs } => (op::XOR, rd | rs << 4, 0),
            Cmp { ra, rb } => (op::CMP, ra | rb << 4, 0),
            Ld { rd, rs, off } => (op::LD, rd | rs << 4, off),
            St { rd, rs, off } => (op::ST, rd | rs << 4, off),
            Ldb { rd, rs, off } => (op::LDB, rd | rs << 4, off),
            Stb { rd, rs, off } => (op::STB, rd | rs << 4, off),
            Jmp { target } => (op::JMP, 0, target as i64),
            Jz { target } => (op::JZ, 0, target as i64),
            Jnz { target } => (op::JNZ, 0, target as i64),
            Call { target } => (op::CALL, 0, target as i64),
            Ret => (op::RET, 0, 0),
            Sys => (op::SYS, 0, 0),
            Rdtime { rd } => (op::RDTIME, rd, 0),
            Cpuinfo { rd } => (op::CPUINFO, rd, 0),
            Rdsb0 { rd } => (op::RDSB0, rd, 0),
            Rdsb1 { rd } => (op::RDSB1, rd, 0),
            Wrsb0 { rs } => (op::WRSB0, rs, 0),
            Wrsb1 { rs } => (op::WRSB1, rs, 0),
            Sigret => (op::SIGRET, 0, 0),
        };
        let i = imm48(imm)?;
        Ok([opc, regs, i[0], i[1], i[2], i[3], i[4], i[5]])
    }

    pub fn decode(bytes: &[u8; 8]) -> Option<Instr> {
        use Instr::*;
        let ra = bytes[1] & 0xf;
        let rb = bytes[1] >> 4;
        let imm = sext48(&bytes[2..]);
        Some(match bytes[0] {
            op::NOP => Nop,
            op::MOVI => Movi { rd: ra, imm },
            op::MOV => Mov { rd: ra, rs: rb },
            op::ADD => Add { rd: ra, rs: rb },
            op::SUB => Sub { rd: ra, rs: rb },
            op::MUL => Mul { rd: ra, rs: rb },
            op::DIV => Div { rd: ra, rs: rb },
            op::AND => And { rd: ra, rs: rb },
            op::OR => Or { rd: ra, rs: rb },
            op::XOR => Xor { rd: ra, rs: rb },
            op::CMP => Cmp { ra, rb },
            op::LD => Ld { rd: ra, rs: rb, off: imm },
            op::ST => St { rd: ra, rs: rb, off: imm },
            op::LDB => Ldb { rd: ra, rs: rb, off: imm },
            op::STB => Stb { rd: ra, rs: rb, off: imm },
            op::JMP => Jmp { target: imm as u64 },
            op::JZ => Jz { target: imm as u64 },
            op::JNZ => Jnz { target: imm as u64 },
            op::CALL => Call { target: imm as u64 },
            op::RET => Ret,
            op::SYS => Sys,
            op::RDTIME => Rdtime { rd: ra },
            op::CPUINFO => Cpuinfo { rd: ra },
            op::RDSB0 => Rdsb0 { rd: ra },
            op::RDSB1 => Rdsb1 { rd: ra },
            op::WRSB0 => Wrsb0 { rs: ra },
            op::WRSB1 => Wrsb1 { rs: ra },
            op::SIGRET => Sigret,
            _ => return None,
        })
    }

    /// True for instructions that end a basic block.
    pub fn is_block_terminator(&self) -> bool {
        use Instr::*;
        matches!(
            self,
            Jmp { .. }
                | Jz { .. }
                | Jnz { .. }
                | Call { .. }
                | Ret
                | Sys
                | Rdtime { .. }
                | Cpuinfo { .. }
                | Wrsb0 { .. }
                | Wrsb1 { .. }
                | Sigret
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemFaultKind {
    Unmapped,
    Perm,
    Isolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFault {
    pub va: u64,
    pub kind: MemFaultKind,
}

/// Memory seen by an executing guest instruction. The direct interpreter
/// backs this with flat memory; the translation engine backs it with the
/// address translation table plus software permission checks.
pub trait Bus {
    fn load(&mut self, va: u64, len: u8) -> Result<u64, MemFault>;
    fn store(&mut self, va: u64, val: u64, len: u8) -> Result<(), MemFault>;
    fn fetch(&mut self, va: u64) -> Result<[u8; 8], MemFault>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IllegalKind {
    Rdtime { rd: u8 },
    Cpuinfo { rd: u8 },
    Wrsb0 { rs: u8 },
    Wrsb1 { rs: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuestFault {
    BadOpcode { pc: u64 },
    Mem { pc: u64, fault: MemFault },
    DivByZero { pc: u64 },
}

/// Result of executing one instruction. `Syscall`, `Illegal` and
/// `Sigret` leave the context untouched (pc still at the instruction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Next,
    Syscall,
    Illegal(IllegalKind),
    Sigret,
    Fault(GuestFault),
}

/// Execute a single decoded instruction against `ctx` and `bus`.
/// On `Next`, ctx.pc has been advanced (sequentially or by branch).
pub fn exec_instr(instr: Instr, ctx: &mut GuestContext, bus: &mut dyn Bus) -> Outcome {
    use Instr::*;
    let pc = ctx.pc;
    let next = pc.wrapping_add(INST_LEN);
    macro_rules! mem {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(fault) => return Outcome::Fault(GuestFault::Mem { pc, fault }),
            }
        };
    }
    match instr {
        Nop => ctx.pc = next,
        Movi { rd, imm } => {
            ctx.g[rd as usize] = imm as u64;
            ctx.pc = next;
        }
        Mov { rd, rs } => {
            ctx.g[rd as usize] = ctx.g[rs as usize];
            ctx.pc = next;
        }
        Add { rd, rs } => {
            ctx.g[rd as usize] = ctx.g[rd as usize].wrapping_add(ctx.g[rs as usize]);
            ctx.pc = next;
        }
        Sub { rd, rs } => {
            ctx.g[rd as usize] = ctx.g[rd as usize].wrapping_sub(ctx.g[rs as usize]);
            ctx.pc = next;
        }
        Mul { rd, rs } => {
            ctx.g[rd as usize] = ctx.g[rd as usize].wrapping_mul(ctx.g[rs as usize]);
            ctx.pc = next;
        }
        Div { rd, rs } => {
            let d = ctx.g[rs as usize];
            if d == 0 {
                return Outcome::Fault(GuestFault::DivByZero { pc });
            }
            ctx.g[rd as usize] /= d;
            ctx.pc = next;
        }
        And { rd, rs } => {
            ctx.g[rd as usize] &= ctx.g[rs as usize];
            ctx.pc = next;
        }
        Or { rd, rs } => {
            ctx.g[rd as usize] |= ctx.g[rs as usize];
            ctx.pc = next;
        }
        Xor { rd, rs } => {
            ctx.g[rd as usize] ^= ctx.g[rs as usize];
            ctx.pc = next;
        }
        Cmp { ra, rb } => {
            ctx.zf = ctx.g[ra as usize] == ctx.g[rb as usize];
            ctx.pc = next;
        }
        Ld { rd, rs, off } => {
            let addr = ctx.g[rs as usize].wrapping_add(off as u64);
            ctx.g[rd as usize] = mem!(bus.load(addr, 8));
            ctx.pc = next;
        }
        St { rd, rs, off } => {
            let addr = ctx.g[rd as usize].wrapping_add(off as u64);
            mem!(bus.store(addr, ctx.g[rs as usize], 8));
            ctx.pc = next;
        }
        Ldb { rd, rs, off } => {
            let addr = ctx.g[rs as usize].wrapping_add(off as u64);
            ctx.g[rd as usize] = mem!(bus.load(addr, 1));
            ctx.pc = next;
        }
        Stb { rd, rs, off } => {
            let addr = ctx.g[rd as usize].wrapping_add(off as u64);
            mem!(bus.store(addr, ctx.g[rs as usize] & 0xff, 1));
            ctx.pc = next;
        }
        Jmp { target } => ctx.pc = target,
        Jz { target } => ctx.pc = if ctx.zf { target } else { next },
        Jnz { target } => ctx.pc = if !ctx.zf { target } else { next },
        Call { target } => {
            let sp = ctx.sp().wrapping_sub(8);
            mem!(bus.store(sp, next, 8));
            ctx.set_sp(sp);
            ctx.pc = target;
        }
        Ret => {
            let sp = ctx.sp();
            let ra = mem!(bus.load(sp, 8));
            ctx.set_sp(sp.wrapping_add(8));
            ctx.pc = ra;
        }
        Sys => return Outcome::Syscall,
        Rdtime { rd } => return Outcome::Illegal(IllegalKind::Rdtime { rd }),
        Cpuinfo { rd } => return Outcome::Illegal(IllegalKind::Cpuinfo { rd }),
        Rdsb0 { rd } => {
            ctx.g[rd as usize] = ctx.sb0;
            ctx.pc = next;
        }
        Rdsb1 { rd } => {
            ctx.g[rd as usize] = ctx.sb1;
            ctx.pc = next;
        }
        Wrsb0 { rs } => return Outcome::Illegal(IllegalKind::Wrsb0 { rs }),
        Wrsb1 { rs } => return Outcome::Illegal(IllegalKind::Wrsb1 { rs }),
        Sigret => return Outcome::Sigret,
    }
    Outcome::Next
}

/// Fetch, decode and execute the instruction at ctx.pc. Pure transition:
/// all state lives in `ctx` and `bus`.
pub fn step(ctx: &mut GuestContext, bus: &mut dyn Bus) -> Outcome {
    let pc = ctx.pc;
    let bytes = match bus.fetch(pc) {
        Ok(b) => b,
        Err(fault) => return Outcome::Fault(GuestFault::Mem { pc, fault }),
    };
    match Instr::decode(&bytes) {
        Some(i) => exec_instr(i, ctx, bus),
        None => Outcome::Fault(GuestFault::BadOpcode { pc }),
    }
}
