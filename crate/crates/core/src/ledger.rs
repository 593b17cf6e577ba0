//! Byte accounting for buffers whose size may depend on sequence length.
//!
//! Benchmarks register every such buffer here instead of probing the
//! allocator, which keeps the numbers deterministic and portable.

use alloc::collections::BTreeMap;
use alloc::string::String;

#[derive(Debug, Clone, Default)]
pub struct AllocationLedger {
    live: BTreeMap<String, usize>,
    current: usize,
    peak: usize,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or replaces) a named buffer of `bytes`.
    pub fn register(&mut self, name: &str, bytes: usize) {
        let old = self.live.insert(name.into(), bytes).unwrap_or(0);
        self.current = self.current - old + bytes;
        self.peak = self.peak.max(self.current);
    }

    /// Grows or shrinks a buffer already registered; unknown names register.
    pub fn resize(&mut self, name: &str, bytes: usize) {
        self.register(name, bytes);
    }

    pub fn release(&mut self, name: &str) {
        if let Some(b) = self.live.remove(name) {
            self.current -= b;
        }
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.live.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_survives_release() {
        let mut l = AllocationLedger::new();
        l.register("a", 10);
        l.register("b", 5);
        l.resize("a", 20);
        assert_eq!(l.current(), 25);
        l.release("a");
        l.release("missing");
        assert_eq!((l.current(), l.peak()), (5, 25));
    }
}
