//! GuestBinary: the on-disk guest program format.
//!
//! Layout (little-endian, stable across versions):
//!   magic "GB64", version byte (1), reserved byte, segment count u16,
//!   entry u64, then per segment: kind u8, perms u8 (bit0 r, bit1 w,
//!   bit2 x), preferred_va u64, length u64, followed by `length` raw
//!   bytes for code/data segments (bss carries no bytes).

use crate::machine::Perms;

pub const MAGIC: &[u8; 4] = b"GB64";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegKind {
    Code,
    Data,
    Bss,
}

impl SegKind {
    fn to_byte(self) -> u8 {
        match self {
            SegKind::Code => 0,
            SegKind::Data => 1,
            SegKind::Bss => 2,
        }
    }
    fn from_byte(b: u8) -> Option<SegKind> {
        Some(match b {
            0 => SegKind::Code,
            1 => SegKind::Data,
            2 => SegKind::Bss,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub preferred_va: u64,
    pub length: u64,
    pub perms: Perms,
    pub kind: SegKind,
    pub bytes: Vec<u8>, // empty for bss
}

#[derive(Debug, Clone)]
pub struct GuestBinary {
    pub entry: u64,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BinfmtError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated binary")]
    Truncated,
    #[error("bad segment kind {0}")]
    BadSegKind(u8),
    #[error("segments overlap at {0:#x}")]
    Overlap(u64),
    #[error("entry {0:#x} not inside a code segment")]
    BadEntry(u64),
}

fn perms_byte(p: Perms) -> u8 {
    (p.r as u8) | (p.w as u8) << 1 | (p.x as u8) << 2
}

fn perms_from_byte(b: u8) -> Perms {
    Perms { r: b & 1 != 0, w: b & 2 != 0, x: b & 4 != 0 }
}

impl GuestBinary {
    /// Validate segment disjointness and that the entry lies in code.
    pub fn validate(&self) -> Result<(), BinfmtError> {
        let mut ranges: Vec<(u64, u64)> = self
            .segments
            .iter()
            .map(|s| (s.preferred_va, s.preferred_va + s.length))
            .collect();
        ranges.sort();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(BinfmtError::Overlap(w[1].0));
            }
        }
        let in_code = self.segments.iter().any(|s| {
            s.kind == SegKind::Code
                && self.entry >= s.preferred_va
                && self.entry < s.preferred_va + s.length
        });
        if !in_code {
            return Err(BinfmtError::BadEntry(self.entry));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(0);
        out.extend_from_slice(&(self.segments.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.entry.to_le_bytes());
        for s in &self.segments {
            out.push(s.kind.to_byte());
            out.push(perms_byte(s.perms));
            out.extend_from_slice(&s.preferred_va.to_le_bytes());
            out.extend_from_slice(&s.length.to_le_bytes());
            if s.kind != SegKind::Bss {
                debug_assert_eq!(s.bytes.len() as u64, s.length);
                out.extend_from_slice(&s.bytes);
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<GuestBinary, BinfmtError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], BinfmtError> {
            if *pos + n > data.len() {
                return Err(BinfmtError::Truncated);
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(BinfmtError::BadMagic);
        }
        let ver = take(&mut pos, 1)?[0];
        if ver != VERSION {
            return Err(BinfmtError::BadVersion(ver));
        }
        take(&mut pos, 1)?; // reserved
        let nseg = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let entry = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut segments = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let kind = SegKind::from_byte(take(&mut pos, 1)?[0])
                .ok_or(BinfmtError::BadSegKind(data[pos - 1]))?;
            let perms = perms_from_byte(take(&mut pos, 1)?[0]);
            let preferred_va = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let length = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let bytes = if kind == SegKind::Bss {
                Vec::new()
            } else {
                take(&mut pos, length as usize)?.to_vec()
            };
            segments.push(Segment { preferred_va, length, perms, kind, bytes });
        }
        let bin = GuestBinary { entry, segments };
        bin.validate()?;
        Ok(bin)
    }
}
