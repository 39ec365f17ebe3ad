//! Text assembler for GISA-64.
//!
//! Directives: `.code` / `.data` / `.bss` (optionally followed by
//! `.at <va>` on the same line), labels (`name:`), and in data segments
//! `.quad`, `.byte`, `.ascii`, `.zero`. Immediates are decimal or 0x-hex;
//! label names may be used wherever an immediate is accepted. Comments
//! start with `;` or `#`. The entry point is the `_start` label when
//! present, otherwise the start of the first code segment.

use std::collections::HashMap;

use super::binfmt::{GuestBinary, SegKind, Segment};
use super::isa::Instr;
use crate::abi::page_align_up;
use crate::machine::Perms;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: undefined label `{name}`")]
    UndefinedLabel { line: usize, name: String },
}

type AResult<T> = Result<T, AsmError>;

fn perr<T>(line: usize, msg: impl Into<String>) -> AResult<T> {
    Err(AsmError::Parse { line, msg: msg.into() })
}

#[derive(Debug, Clone)]
enum Item {
    Instr { line: usize, instr: RawInstr },
    Quad { line: usize, vals: Vec<Operand> },
    Byte { vals: Vec<u8> },
    Ascii { bytes: Vec<u8> },
    Zero { len: u64 },
}

/// An operand that may still be a label reference.
#[derive(Debug, Clone)]
enum Operand {
    Imm(i64),
    Label(String),
}

/// Instruction with possibly-unresolved label operands.
#[derive(Debug, Clone)]
enum RawInstr {
    Resolved(Instr),
    Movi { rd: u8, op: Operand },
    Branch { kind: BranchKind, op: Operand },
}

#[derive(Debug, Clone, Copy)]
enum BranchKind {
    Jmp,
    Jz,
    Jnz,
    Call,
}

#[derive(Debug)]
struct RawSegment {
    kind: SegKind,
    at: Option<u64>,
    items: Vec<Item>,
}

impl Item {
    fn size(&self) -> u64 {
        match self {
            Item::Instr { .. } => 8,
            Item::Quad { vals, .. } => 8 * vals.len() as u64,
            Item::Byte { vals } => vals.len() as u64,
            Item::Ascii { bytes } => bytes.len() as u64,
            Item::Zero { len } => *len,
        }
    }
}

pub fn assemble(source: &str) -> AResult<GuestBinary> {
    let mut segments: Vec<RawSegment> = Vec::new();
    let mut labels: HashMap<String, (usize, u64)> = HashMap::new(); // name -> (seg idx, offset)

    let mut cur: Option<usize> = None;
    let mut cur_off: u64 = 0;

    for (lineno, raw_line) in source.lines().enumerate() {
        let line = lineno + 1;
        let text = strip_comment(raw_line).trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix('.') {
            let mut parts = rest.split_whitespace();
            let dir = parts.next().unwrap_or("");
            match dir {
                "code" | "data" | "bss" => {
                    let kind = match dir {
                        "code" => SegKind::Code,
                        "data" => SegKind::Data,
                        _ => SegKind::Bss,
                    };
                    let mut at = None;
                    let tail: Vec<&str> = parts.collect();
                    if !tail.is_empty() {
                        if tail.len() == 2 && tail[0] == ".at" {
                            at = Some(parse_u64(tail[1], line)?);
                        } else {
                            return perr(line, format!("bad segment directive tail {tail:?}"));
                        }
                    }
                    segments.push(RawSegment { kind, at, items: Vec::new() });
                    cur = Some(segments.len() - 1);
                    cur_off = 0;
                    continue;
                }
                "at" => {
                    let seg = match cur {
                        Some(i) => &mut segments[i],
                        None => return perr(line, ".at before any segment"),
                    };
                    if cur_off != 0 {
                        return perr(line, ".at after segment content");
                    }
                    let va = parts.next().ok_or(AsmError::Parse { line, msg: ".at needs a value".into() })?;
                    seg.at = Some(parse_u64(va, line)?);
                    continue;
                }
                _ => {}
            }
        }

        let seg_idx = match cur {
            Some(i) => i,
            None => return perr(line, "content before any segment directive"),
        };

        let mut text = text;
        // Peel off any leading labels on this line.
        while let Some(colon) = find_label_colon(text) {
            let name = text[..colon].trim();
            if !is_ident(name) {
                return perr(line, format!("bad label name `{name}`"));
            }
            if labels.insert(name.to_string(), (seg_idx, cur_off)).is_some() {
                return perr(line, format!("duplicate label `{name}`"));
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }

        let seg_kind = segments[seg_idx].kind;
        let item = if let Some(rest) = text.strip_prefix('.') {
            let (dir, tail) = split_first_word(rest);
            match dir {
                "quad" => {
                    let vals = split_commas(tail)
                        .iter()
                        .map(|t| parse_operand(t, line))
                        .collect::<AResult<Vec<_>>>()?;
                    Item::Quad { line, vals }
                }
                "byte" => {
                    let vals = split_commas(tail)
                        .iter()
                        .map(|t| parse_u64(t, line).map(|v| v as u8))
                        .collect::<AResult<Vec<_>>>()?;
                    Item::Byte { vals }
                }
                "ascii" => Item::Ascii { bytes: parse_string(tail.trim(), line)? },
                "zero" => Item::Zero { len: parse_u64(tail.trim(), line)? },
                _ => return perr(line, format!("unknown directive .{dir}")),
            }
        } else {
            if seg_kind != SegKind::Code {
                return perr(line, "instructions only allowed in .code");
            }
            Item::Instr { line, instr: parse_instr(text, line)? }
        };
        if seg_kind == SegKind::Bss && !matches!(item, Item::Zero { .. }) {
            return perr(line, "only .zero allowed in .bss");
        }
        cur_off += item.size();
        segments[seg_idx].items.push(item);
    }

    if segments.is_empty() {
        return perr(0, "empty program");
    }

    // Assign segment base addresses.
    let mut bases: Vec<u64> = Vec::with_capacity(segments.len());
    let mut next_free: u64 = 0x10000;
    for seg in &segments {
        let base = seg.at.unwrap_or(next_free);
        bases.push(base);
        let len: u64 = seg.items.iter().map(Item::size).sum();
        next_free = page_align_up(base + len.max(1));
    }

    // Resolve labels to absolute addresses.
    let addr_of = |name: &str| -> Option<u64> {
        labels.get(name).map(|(seg, off)| bases[*seg] + off)
    };

    let mut out_segments = Vec::new();
    for (idx, seg) in segments.iter().enumerate() {
        let base = bases[idx];
        let mut bytes = Vec::new();
        let mut bss_len = 0u64;
        for item in &seg.items {
            match item {
                Item::Instr { line, instr } => {
                    let resolved = match instr {
                        RawInstr::Resolved(i) => *i,
                        RawInstr::Movi { rd, op } => Instr::Movi {
                            rd: *rd,
                            imm: resolve_operand(op, &addr_of, *line)?,
                        },
                        RawInstr::Branch { kind, op } => {
                            let target = resolve_operand(op, &addr_of, *line)? as u64;
                            match kind {
                                BranchKind::Jmp => Instr::Jmp { target },
                                BranchKind::Jz => Instr::Jz { target },
                                BranchKind::Jnz => Instr::Jnz { target },
                                BranchKind::Call => Instr::Call { target },
                            }
                        }
                    };
                    let enc = resolved
                        .encode()
                        .map_err(|e| AsmError::Parse { line: *line, msg: e.to_string() })?;
                    bytes.extend_from_slice(&enc);
                }
                Item::Quad { line, vals } => {
                    for v in vals {
                        let val = resolve_operand(v, &addr_of, *line)?;
                        bytes.extend_from_slice(&(val as u64).to_le_bytes());
                    }
                }
                Item::Byte { vals } => bytes.extend_from_slice(vals),
                Item::Ascii { bytes: b } => bytes.extend_from_slice(b),
                Item::Zero { len } => {
                    if seg.kind == SegKind::Bss {
                        bss_len += len;
                    } else {
                        bytes.extend(std::iter::repeat(0u8).take(*len as usize));
                    }
                }
            }
        }
        let (length, perms) = match seg.kind {
            SegKind::Code => (bytes.len() as u64, Perms::rx()),
            SegKind::Data => (bytes.len() as u64, Perms::rw()),
            SegKind::Bss => (bss_len, Perms::rw()),
        };
        if length == 0 {
            continue;
        }
        out_segments.push(Segment { preferred_va: base, length, perms, kind: seg.kind, bytes });
    }

    let entry = match addr_of("_start") {
        Some(a) => a,
        None => out_segments
            .iter()
            .find(|s| s.kind == SegKind::Code)
            .map(|s| s.preferred_va)
            .ok_or(AsmError::Parse { line: 0, msg: "no code segment".into() })?,
    };

    let bin = GuestBinary { entry, segments: out_segments };
    bin.validate().map_err(|e| AsmError::Parse { line: 0, msg: e.to_string() })?;
    Ok(bin)
}

fn resolve_operand(
    op: &Operand,
    addr_of: &dyn Fn(&str) -> Option<u64>,
    line: usize,
) -> AResult<i64> {
    match op {
        Operand::Imm(v) => Ok(*v),
        Operand::Label(name) => addr_of(name)
            .map(|a| a as i64)
            .ok_or_else(|| AsmError::UndefinedLabel { line, name: name.clone() }),
    }
}

fn strip_comment(line: &str) -> &str {
    // A ; or # inside a string literal does not start a comment.
    let mut in_str = false;
    let mut prev_escape = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' if !prev_escape => in_str = !in_str,
            ';' | '#' if !in_str => return &line[..i],
            _ => {}
        }
        prev_escape = c == '\\' && !prev_escape;
    }
    line
}

fn find_label_colon(text: &str) -> Option<usize> {
    let colon = text.find(':')?;
    let head = &text[..colon];
    if is_ident(head.trim()) {
        Some(colon)
    } else {
        None
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false)
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_first_word(s: &str) -> (&str, &str) {
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    }
}

fn split_commas(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

fn parse_u64(tok: &str, line: usize) -> AResult<u64> {
    let tok = tok.trim();
    let (neg, digits) = match tok.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, tok),
    };
    let val = if let Some(hex) = digits.strip_prefix("0x").or_else(|| digits.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        digits.replace('_', "").parse::<u64>()
    };
    match val {
        Ok(v) if neg => Ok((v as i64).wrapping_neg() as u64),
        Ok(v) => Ok(v),
        Err(_) => perr(line, format!("bad number `{tok}`")),
    }
}

fn parse_i64(tok: &str, line: usize) -> AResult<i64> {
    parse_u64(tok, line).map(|v| v as i64)
}

fn parse_operand(tok: &str, line: usize) -> AResult<Operand> {
    let tok = tok.trim();
    if is_ident(tok) {
        Ok(Operand::Label(tok.to_string()))
    } else {
        Ok(Operand::Imm(parse_i64(tok, line)?))
    }
}

fn parse_reg(tok: &str, line: usize) -> AResult<u8> {
    let tok = tok.trim();
    if let Some(n) = tok.strip_prefix('g') {
        if let Ok(v) = n.parse::<u8>() {
            if v < 16 {
                return Ok(v);
            }
        }
    }
    perr(line, format!("bad register `{tok}`"))
}

/// Parse `[gN]` or `[gN+off]` / `[gN-off]`.
fn parse_memref(tok: &str, line: usize) -> AResult<(u8, i64)> {
    let tok = tok.trim();
    let inner = tok
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or(AsmError::Parse { line, msg: format!("bad memory operand `{tok}`") })?
        .trim();
    if let Some(plus) = inner.find('+') {
        let reg = parse_reg(&inner[..plus], line)?;
        let off = parse_i64(inner[plus + 1..].trim(), line)?;
        Ok((reg, off))
    } else if let Some(minus) = inner[1..].find('-') {
        let reg = parse_reg(&inner[..minus + 1], line)?;
        let off = parse_i64(inner[minus + 1..].trim(), line)?;
        Ok((reg, off))
    } else {
        Ok((parse_reg(inner, line)?, 0))
    }
}

fn parse_string(tok: &str, line: usize) -> AResult<Vec<u8>> {
    let inner = tok
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .ok_or(AsmError::Parse { line, msg: format!("bad string literal {tok}") })?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push(b'\n'),
                Some('t') => out.push(b'\t'),
                Some('0') => out.push(0),
                Some('\\') => out.push(b'\\'),
                Some('"') => out.push(b'"'),
                other => return perr(line, format!("bad escape \\{other:?}")),
            }
        } else {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Ok(out)
}

fn parse_instr(text: &str, line: usize) -> AResult<RawInstr> {
    let (mnem, tail) = split_first_word(text);
    let args = split_commas(tail);
    let argc = args.len();
    let need = |n: usize| -> AResult<()> {
        if argc != n {
            perr(line, format!("{mnem} expects {n} operand(s), got {argc}"))
        } else {
            Ok(())
        }
    };
    use Instr::*;
    let rr = |f: &dyn Fn(u8, u8) -> Instr| -> AResult<RawInstr> {
        need(2)?;
        Ok(RawInstr::Resolved(f(parse_reg(args[0], line)?, parse_reg(args[1], line)?)))
    };
    let r1 = |f: &dyn Fn(u8) -> Instr| -> AResult<RawInstr> {
        need(1)?;
        Ok(RawInstr::Resolved(f(parse_reg(args[0], line)?)))
    };
    match mnem {
        "nop" => {
            need(0)?;
            Ok(RawInstr::Resolved(Nop))
        }
        "movi" => {
            need(2)?;
            Ok(RawInstr::Movi { rd: parse_reg(args[0], line)?, op: parse_operand(args[1], line)? })
        }
        "mov" => rr(&|rd, rs| Mov { rd, rs }),
        "add" => rr(&|rd, rs| Add { rd, rs }),
        "sub" => rr(&|rd, rs| Sub { rd, rs }),
        "mul" => rr(&|rd, rs| Mul { rd, rs }),
        "div" => rr(&|rd, rs| Div { rd, rs }),
        "and" => rr(&|rd, rs| And { rd, rs }),
        "or" => rr(&|rd, rs| Or { rd, rs }),
        "xor" => rr(&|rd, rs| Xor { rd, rs }),
        "cmp" => rr(&|ra, rb| Cmp { ra, rb }),
        "ld" | "ldb" => {
            need(2)?;
            let rd = parse_reg(args[0], line)?;
            let (rs, off) = parse_memref(args[1], line)?;
            Ok(RawInstr::Resolved(if mnem == "ld" {
                Ld { rd, rs, off }
            } else {
                Ldb { rd, rs, off }
            }))
        }
        "st" | "stb" => {
            need(2)?;
            let (rd, off) = parse_memref(args[0], line)?;
            let rs = parse_reg(args[1], line)?;
            Ok(RawInstr::Resolved(if mnem == "st" {
                St { rd, rs, off }
            } else {
                Stb { rd, rs, off }
            }))
        }
        "jmp" | "jz" | "jnz" | "call" => {
            need(1)?;
            let kind = match mnem {
                "jmp" => BranchKind::Jmp,
                "jz" => BranchKind::Jz,
                "jnz" => BranchKind::Jnz,
                _ => BranchKind::Call,
            };
            Ok(RawInstr::Branch { kind, op: parse_operand(args[0], line)? })
        }
        "ret" => {
            need(0)?;
            Ok(RawInstr::Resolved(Ret))
        }
        "sys" => {
            need(0)?;
            Ok(RawInstr::Resolved(Sys))
        }
        "sigret" => {
            need(0)?;
            Ok(RawInstr::Resolved(Sigret))
        }
        "rdtime" => r1(&|rd| Rdtime { rd }),
        "cpuinfo" => r1(&|rd| Cpuinfo { rd }),
        "rdsb0" => r1(&|rd| Rdsb0 { rd }),
        "rdsb1" => r1(&|rd| Rdsb1 { rd }),
        "wrsb0" => r1(&|rs| Wrsb0 { rs }),
        "wrsb1" => r1(&|rs| Wrsb1 { rs }),
        _ => perr(line, format!("unknown mnemonic `{mnem}`")),
    }
}

/// Render one instruction in assembler syntax (numeric addresses).
pub fn disassemble(instr: &Instr) -> String {
    use Instr::*;
    match *instr {
        Nop => "nop".into(),
        Movi { rd, imm } => format!("movi g{rd}, {imm}"),
        Mov { rd, rs } => format!("mov g{rd}, g{rs}"),
        Add { rd, rs } => format!("add g{rd}, g{rs}"),
        Sub { rd, rs } => format!("sub g{rd}, g{rs}"),
        Mul { rd, rs } => format!("mul g{rd}, g{rs}"),
        Div { rd, rs } => format!("div g{rd}, g{rs}"),
        And { rd, rs } => format!("and g{rd}, g{rs}"),
        Or { rd, rs } => format!("or g{rd}, g{rs}"),
        Xor { rd, rs } => format!("xor g{rd}, g{rs}"),
        Cmp { ra, rb } => format!("cmp g{ra}, g{rb}"),
        Ld { rd, rs, off } => format!("ld g{rd}, [g{rs}+{off}]"),
        St { rd, rs, off } => format!("st [g{rd}+{off}], g{rs}"),
        Ldb { rd, rs, off } => format!("ldb g{rd}, [g{rs}+{off}]"),
        Stb { rd, rs, off } => format!("stb [g{rd}+{off}], g{rs}"),
        Jmp { target } => format!("jmp 0x{target:x}"),
        Jz { target } => format!("jz 0x{target:x}"),
        Jnz { target } => format!("jnz 0x{target:x}"),
        Call { target } => format!("call 0x{target:x}"),
        Ret => "ret".into(),
        Sys => "sys".into(),
        Rdtime { rd } => format!("rdtime g{rd}"),
        Cpuinfo { rd } => format!("cpuinfo g{rd}"),
        Rdsb0 { rd } => format!("rdsb0 g{rd}"),
        Rdsb1 { rd } => format!("rdsb1 g{rd}"),
        Wrsb0 { rs } => format!("wrsb0 g{rs}"),
        Wrsb1 { rs } => format!("wrsb1 g{rs}"),
        Sigret => "sigret".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_exit_program() {
        let bin = assemble(".code .at 0x11000\n_start:\n  movi g0, 13\n  movi g1, 0\n  sys\n").unwrap();
        assert_eq!(bin.entry, 0x11000);
        assert_eq!(bin.segments.len(), 1);
        assert_eq!(bin.segments[0].length, 24);
        let i = Instr::decode(bin.segments[0].bytes[0..8].try_into().unwrap()).unwrap();
        assert_eq!(i, Instr::Movi { rd: 0, imm: 13 });
    }

    #[test]
    fn undefined_label_reported() {
        let err = assemble(".code\n jmp nowhere\n").unwrap_err();
        assert!(matches!(err, AsmError::UndefinedLabel { line: 2, .. }));
    }

    #[test]
    fn parse_error_has_line() {
        let err = assemble(".code\n bogus g1\n").unwrap_err();
        assert!(matches!(err, AsmError::Parse { line: 2, .. }));
    }

    #[test]
    fn data_directives_and_label_refs() {
        let src = "\
.code .at 0x11000
_start:
  movi g1, msg
  ld g2, [g1+0]
  sys
.data .at 0x20000
msg: .ascii \"hi\\n\"
val: .quad 7, msg
tab: .byte 1, 2, 3
pad: .zero 5
.bss .at 0x30000
scratch: .zero 4096
";
        let bin = assemble(src).unwrap();
        assert_eq!(bin.segments.len(), 3);
        let data = &bin.segments[1];
        assert_eq!(&data.bytes[..3], b"hi\n");
        assert_eq!(u64::from_le_bytes(data.bytes[3..11].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(data.bytes[11..19].try_into().unwrap()), 0x20000);
        assert_eq!(data.length, 3 + 16 + 3 + 5);
        assert_eq!(bin.segments[2].length, 4096);
        assert!(bin.segments[2].bytes.is_empty());
    }

    #[test]
    fn assemble_disassemble_assemble_identity() {
        let src = "\
.code .at 0x11000
_start:
  movi g1, 0x20000
  movi g2, -3
  add g1, g2
  cmp g1, g2
  jz 0x11000
  ld g3, [g1+16]
  st [g1+-8], g3
  call 0x11048
  ret
  sys
";
        let bin = assemble(src).unwrap();
        let code = &bin.segments[0];
        // Disassemble and rebuild the source with the same base address.
        let mut rebuilt = String::from(".code .at 0x11000\n");
        for chunk in code.bytes.chunks(8) {
            let i = Instr::decode(chunk.try_into().unwrap()).unwrap();
            rebuilt.push_str(&disassemble(&i));
            rebuilt.push('\n');
        }
        let bin2 = assemble(&rebuilt).unwrap();
        assert_eq!(bin2.segments[0].bytes, code.bytes);
    }

    #[test]
    fn comment_and_blank_handling() {
        let bin = assemble("; leading comment\n.code\n_start: nop # tail\n\n").unwrap();
        assert_eq!(bin.segments[0].length, 8);
    }
}
