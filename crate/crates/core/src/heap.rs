//! Per-thread worker min-heap and the sequence lock that guards it.
//!
//! The heap is a binary min-heap over a logical flat array made of chained
//! segments. The first segment holds `hls` entries; each further segment is
//! twice the size of the previous one, so logical index `i` lives in segment
//! `floor(log2(i / hls + 1))`.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::Backoff;

use crate::config::{Key, Value};

/// Lock word whose parity is the lock state: even is free, odd is held.
/// Every acquire and every release bumps the counter by one, so the value
/// increases strictly across lock generations.
#[derive(Debug, Default)]
pub struct SeqLock {
    word: AtomicU64,
}

/// Proof of acquisition: the odd counter value written by the acquiring CAS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub struct LockToken(u64);

impl LockToken {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl SeqLock {
    pub const fn new() -> Self {
        SeqLock {
            word: AtomicU64::new(0),
        }
    }

    pub fn load(&self) -> u64 {
        self.word.load(Ordering::Acquire)
    }

    pub fn is_locked(&self) -> bool {
        self.load() % 2 == 1
    }

    /// Single acquisition attempt against the value the caller last observed.
    pub fn try_lock_from(&self, observed: u64) -> Option<LockToken> {
        if !observed.is_multiple_of(2) {
            return None;
        }
        self.word
            .compare_exchange(observed, observed + 1, Ordering::Acquire, Ordering::Relaxed)
            .ok()
            .map(|_| LockToken(observed + 1))
    }

    pub fn try_lock(&self) -> Option<LockToken> {
        self.try_lock_from(self.load())
    }

    /// Spins until the lock is acquired.
    pub fn lock(&self) -> LockToken {
        let backoff = Backoff::new();
        loop {
            let v = self.load();
            if v.is_multiple_of(2) {
                if let Some(t) = self.try_lock_from(v) {
                    return t;
                }
            } else {
                while self.load() == v {
                    backoff.snooze();
                }
            }
        }
    }

    pub fn unlock(&self, token: LockToken) {
        debug_assert_eq!(self.word.load(Ordering::Relaxed), token.0, "unlock by non-holder");
        self.word.store(token.0 + 1, Ordering::Release);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeapEntry {
    pub key: Key,
    pub val: Value,
}

impl HeapEntry {
    pub fn new(key: Key, val: Value) -> Self {
        HeapEntry { key, val }
    }
}

/// Unsynchronized binary min-heap. All access happens under the owning
/// [`SeqLock`].
#[derive(Debug, Clone)]
pub struct WorkerHeap {
    hls: usize,
    segments: Vec<Box<[HeapEntry]>>,
    size: usize,
    capacity: usize,
}

#[inline]
fn parent(i: usize) -> usize {
    (i - 1) / 2
}

impl WorkerHeap {
    pub fn new(hls: usize) -> Self {
        assert!(hls > 0, "heap segment capacity must be positive");
        WorkerHeap {
            hls,
            segments: vec![vec![HeapEntry::default(); hls].into_boxed_slice()],
            size: 0,
            capacity: hls,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Number of chained segments currently allocated.
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    fn locate(&self, i: usize) -> (usize, usize) {
        if i < self.hls {
            return (0, i);
        }
        let q = i / self.hls + 1;
        let seg = (usize::BITS - 1 - q.leading_zeros()) as usize;
        let start = self.hls * ((1usize << seg) - 1);
        (seg, i - start)
    }

    #[inline]
    fn at(&self, i: usize) -> &HeapEntry {
        let (s, o) = self.locate(i);
        &self.segments[s][o]
    }

    #[inline]
    fn at_mut(&mut self, i: usize) -> &mut HeapEntry {
        let (s, o) = self.locate(i);
        &mut self.segments[s][o]
    }

    fn grow(&mut self) {
        let next = self.hls << self.segments.len();
        self.segments
            .push(vec![HeapEntry::default(); next].into_boxed_slice());
        self.capacity += next;
    }

    /// Inserts `(key, val)` and sifts it up past strictly larger parents.
    pub fn insert(&mut self, key: Key, val: Value) {
        if self.size == self.capacity {
            self.grow();
        }
        if self.size == 0 {
            *self.at_mut(0) = HeapEntry { key, val };
            self.size = 1;
            return;
        }
        let mut idx = self.size;
        while idx > 0 {
            let p = parent(idx);
            let pe = *self.at(p);
            if key >= pe.key {
                break;
            }
            *self.at_mut(idx) = pe;
            idx = p;
        }
        *self.at_mut(idx) = HeapEntry { key, val };
        self.size += 1;
    }

    /// Removes the root. When both children are smaller than the sifted
    /// element and `left.key >= right.key`, the right child moves up.
    pub fn delete_min(&mut self) -> Option<(Key, Value)> {
        match self.size {
            0 => return None,
            1 => {
                self.size = 0;
                let e = *self.at(0);
                return Some((e.key, e.val));
            }
            _ => {}
        }
        let root = *self.at(0);
        let last = *self.at(self.size - 1);
        self.size -= 1;
        let size = self.size;
        let mut idx = 0;
        loop {
            let l = 2 * idx + 1;
            let r = l + 1;
            let below_l = l < size && last.key > self.at(l).key;
            let below_r = r < size && last.key > self.at(r).key;
            if !(below_l || below_r) {
                break;
            }
            let child = if r < size && self.at(l).key >= self.at(r).key {
                r
            } else {
                l
            };
            *self.at_mut(idx) = *self.at(child);
            idx = child;
        }
        *self.at_mut(idx) = last;
        Some((root.key, root.val))
    }

    pub fn peek_min(&self) -> Option<Key> {
        (self.size > 0).then(|| self.at(0).key)
    }

    pub fn peek_entry(&self) -> Option<HeapEntry> {
        (self.size > 0).then(|| *self.at(0))
    }

    pub fn iter(&self) -> impl Iterator<Item = HeapEntry> + '_ {
        (0..self.size).map(move |i| *self.at(i))
    }

    /// First index whose key is smaller than its parent's, if any.
    pub fn heap_order_violation(&self) -> Option<usize> {
        (1..self.size).find(|&i| self.at(parent(i)).key > self.at(i).key)
    }
}
