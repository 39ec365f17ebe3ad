//! Address translation table: non-overlapping original (app-visible)
//! address ranges mapped to equal-length actual ranges in enclave
//! private memory. Lookup is functional — one original address resolves
//! to exactly one actual address for the lifetime of its mapping.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XlatEntry {
    pub len: u64,
    pub actual: u64,
}

#[derive(Debug, Default)]
pub struct AddrXlat {
    map: BTreeMap<u64, XlatEntry>,
}

impl AddrXlat {
    pub fn new() -> AddrXlat {
        AddrXlat::default()
    }

    pub fn insert(&mut self, orig: u64, len: u64, actual: u64) -> Result<(), ()> {
        if len == 0 {
            return Err(());
        }
        for (&s, e) in self.map.range(..orig + len) {
            if s + e.len > orig {
                return Err(());
            }
        }
        self.map.insert(orig, XlatEntry { len, actual });
        Ok(())
    }

    /// Remove every entry intersecting [orig, orig+len), splitting
    /// entries that straddle the boundary.
    pub fn remove(&mut self, orig: u64, len: u64) {
        self.split_at(orig);
        self.split_at(orig + len);
        let doomed: Vec<u64> = self.map.range(orig..orig + len).map(|(&s, _)| s).collect();
        for s in doomed {
            self.map.remove(&s);
        }
    }

    fn split_at(&mut self, at: u64) {
        if let Some((s, e)) = self.entry_at(at) {
            if s < at {
                let head = at - s;
                let tail = XlatEntry { len: e.len - head, actual: e.actual + head };
                self.map.get_mut(&s).unwrap().len = head;
                self.map.insert(at, tail);
            }
        }
    }

    fn entry_at(&self, orig: u64) -> Option<(u64, XlatEntry)> {
        let (&s, e) = self.map.range(..=orig).next_back()?;
        if orig < s + e.len {
            Some((s, *e))
        } else {
            None
        }
    }

    /// Resolve one original address.
    pub fn lookup(&self, orig: u64) -> Option<u64> {
        let (s, e) = self.entry_at(orig)?;
        Some(e.actual + (orig - s))
    }

    /// Resolve [orig, orig+len) when it is contiguous in actual space
    /// (entirely inside one entry).
    pub fn lookup_range(&self, orig: u64, len: u64) -> Option<u64> {
        let (s, e) = self.entry_at(orig)?;
        if orig + len <= s + e.len {
            Some(e.actual + (orig - s))
        } else {
            None
        }
    }

    /// Point remapping: redirect [orig, orig+len) (currently mapped) to a
    /// new actual base. Used by the permission-change relocation.
    pub fn remap(&mut self, orig: u64, len: u64, new_actual: u64) {
        self.remove(orig, len);
        self.map.insert(orig, XlatEntry { len, actual: new_actual });
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &XlatEntry)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}
