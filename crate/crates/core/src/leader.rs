//! Lock-free sorted leader list.
//!
//! Each successor word carries two mark bits:
//!
//! * `LOGDEL` (bit 0): set on a node's `next` by delete-min and means the
//!   *successor* is logically deleted. Deleted nodes form a prefix that is
//!   unlinked in batches once it grows past `max_offset`.
//! * `MOVING` (bit 1): set on a node's own `next` when its owner demotes it
//!   back to its worker heap. Moving nodes are unlinked by whichever traversal
//!   reaches them first.
//!
//! Usage contract: any number of concurrent [`LeaderList::insert`]s, at most
//! one [`LeaderList::delete_min`] at a time (the coordinator), and at most
//! one [`LeaderList::delete_max_of`] per thread id, issued by the holder of
//! that thread's heap lock.
//!
//! Unlinked nodes are retired through `crossbeam-epoch`. The per-thread
//! [`LargestHandle`] never dereferences its node; it caches the key and is
//! compared by address only. Whoever logically deletes a node that a handle
//! designates marks the handle stale before the node can be unlinked.

use std::fmt::{self, Write as _};
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};

use crossbeam_epoch::{self as epoch, Atomic, Guard, Owned, Shared};

use crate::config::{Key, ThreadId, Value};

pub const LOGDEL: usize = 0b01;
pub const MOVING: usize = 0b10;

const CLAIM_DELMIN: u8 = 0b01;
const CLAIM_MOVING: u8 = 0b10;

/// Bit queries and encodings on successor words.
pub mod marks {
    use super::{LOGDEL, MOVING};
    use crossbeam_epoch::{Pointable, Shared};

    #[inline]
    pub fn is_logdel<T: ?Sized + Pointable>(w: Shared<'_, T>) -> bool {
        w.tag() & LOGDEL != 0
    }
    #[inline]
    pub fn is_moving<T: ?Sized + Pointable>(w: Shared<'_, T>) -> bool {
        w.tag() & MOVING != 0
    }
    #[inline]
    pub fn is_marked<T: ?Sized + Pointable>(w: Shared<'_, T>) -> bool {
        w.tag() & (LOGDEL | MOVING) != 0
    }
    #[inline]
    pub fn with_logdel<T: ?Sized + Pointable>(w: Shared<'_, T>) -> Shared<'_, T> {
        w.with_tag(w.tag() | LOGDEL)
    }
    #[inline]
    pub fn with_moving<T: ?Sized + Pointable>(w: Shared<'_, T>) -> Shared<'_, T> {
        w.with_tag(w.tag() | MOVING)
    }
    #[inline]
    pub fn not_logdel<T: ?Sized + Pointable>(w: Shared<'_, T>) -> Shared<'_, T> {
        w.with_tag(w.tag() & !LOGDEL)
    }
    #[inline]
    pub fn unmarked<T: ?Sized + Pointable>(w: Shared<'_, T>) -> Shared<'_, T> {
        w.with_tag(0)
    }
}

use marks::*;

pub struct LeaderNode {
    key: Key,
    val: Value,
    tid: ThreadId,
    next: Atomic<LeaderNode>,
    claim: AtomicU8,
}

impl LeaderNode {
    fn new(key: Key, val: Value, tid: ThreadId) -> Self {
        LeaderNode {
            key,
            val,
            tid,
            next: Atomic::null(),
            claim: AtomicU8::new(0),
        }
    }

    pub fn key(&self) -> Key {
        self.key
    }
    pub fn val(&self) -> Value {
        self.val
    }
    pub fn tid(&self) -> ThreadId {
        self.tid
    }
}

const HANDLE_NONE: usize = 0;
const HANDLE_STALE: usize = 1;

/// Designates the leader node holding a thread's largest key.
///
/// Written only by the holder of that thread's heap lock, except that the
/// coordinator may flip it to stale after deleting the designated node.
/// A stale handle reads as empty.
#[derive(Debug, Default)]
pub struct LargestHandle {
    ptr: AtomicUsize,
    key: AtomicU64,
}

impl LargestHandle {
    pub const fn new() -> Self {
        LargestHandle {
            ptr: AtomicUsize::new(HANDLE_NONE),
            key: AtomicU64::new(0),
        }
    }

    /// Cached key of the designated node.
    pub fn key(&self) -> Option<Key> {
        match self.ptr.load(Ordering::SeqCst) {
            HANDLE_NONE | HANDLE_STALE => None,
            _ => Some(self.key.load(Ordering::Relaxed)),
        }
    }

    /// Address of the designated node, if any.
    pub fn addr(&self) -> Option<usize> {
        match self.ptr.load(Ordering::SeqCst) {
            HANDLE_NONE | HANDLE_STALE => None,
            p => Some(p),
        }
    }

    pub fn is_stale(&self) -> bool {
        self.ptr.load(Ordering::SeqCst) == HANDLE_STALE
    }

    pub fn clear(&self) {
        self.ptr.store(HANDLE_NONE, Ordering::SeqCst);
    }

    fn publish(&self, node: Shared<'_, LeaderNode>) {
        // SAFETY: callers pass nodes reached under their pinned guard.
        let n = unsafe { node.deref() };
        let addr = node.as_raw() as usize;
        self.key.store(n.key, Ordering::Relaxed);
        self.ptr.store(addr, Ordering::SeqCst);
        // Pairs with `invalidate`: either the coordinator sees our store, or
        // we see its claim.
        if n.claim.load(Ordering::SeqCst) & CLAIM_DELMIN != 0 {
            let _ = self.ptr.compare_exchange(
                addr,
                HANDLE_STALE,
                Ordering::SeqCst,
                Ordering::SeqCst,
            );
        }
    }

    /// Marks the handle stale if it still designates `addr`.
    pub fn invalidate(&self, addr: usize) {
        let _ = self
            .ptr
            .compare_exchange(addr, HANDLE_STALE, Ordering::SeqCst, Ordering::SeqCst);
    }
}

/// Element removed by [`LeaderList::delete_min`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeletedMin {
    pub key: Key,
    pub val: Value,
    pub tid: ThreadId,
    /// Address of the deleted node, for [`LargestHandle::invalidate`].
    pub addr: usize,
}

/// One node as seen by a quiescent scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeView {
    pub key: Key,
    pub val: Value,
    pub tid: ThreadId,
    /// Predecessor's successor word carries `LOGDEL`.
    pub deleted: bool,
    /// Own successor word carries `MOVING`.
    pub moving: bool,
    /// Own successor word carries `LOGDEL`.
    pub marks_successor: bool,
    pub addr: usize,
}

pub struct LeaderList {
    head: *mut LeaderNode,
    tail: *mut LeaderNode,
    max_offset: usize,
    claim_conflicts: AtomicU64,
}

// SAFETY: nodes are only mutated through atomics; raw sentinels live as long
// as the list.
unsafe impl Send for LeaderList {}
unsafe impl Sync for LeaderList {}

impl LeaderList {
    pub fn new(max_offset: usize) -> Self {
        let tail = Box::into_raw(Box::new(LeaderNode::new(Key::MAX, 0, usize::MAX)));
        let head = Box::new(LeaderNode::new(Key::MIN, 0, usize::MAX));
        head.next.store(Shared::from(tail as *const _), Ordering::Relaxed);
        LeaderList {
            head: Box::into_raw(head),
            tail,
            max_offset,
            claim_conflicts: AtomicU64::new(0),
        }
    }

    pub fn max_offset(&self) -> usize {
        self.max_offset
    }

    /// Times a node was claimed by both delete-min and a demotion. Always
    /// zero when the usage contract is respected.
    pub fn claim_conflicts(&self) -> u64 {
        self.claim_conflicts.load(Ordering::Relaxed)
    }

    #[inline]
    fn head<'g>(&self) -> Shared<'g, LeaderNode> {
        Shared::from(self.head as *const _)
    }

    #[inline]
    fn tail<'g>(&self) -> Shared<'g, LeaderNode> {
        Shared::from(self.tail as *const _)
    }

    #[inline]
    fn node<'g>(p: Shared<'g, LeaderNode>) -> &'g LeaderNode {
        debug_assert!(!p.is_null());
        // SAFETY: every non-null pointer reached from the list is either a
        // sentinel or a node whose reclamation waits for our guard.
        unsafe { p.deref() }
    }

    /// Defers destruction of the frozen chain `[from, to)` after the caller's
    /// CAS unlinked it.
    ///
    /// # Safety
    /// The caller's CAS must have swung a predecessor from `from` to `to`.
    unsafe fn retire_chain(&self, from: Shared<'_, LeaderNode>, to: Shared<'_, LeaderNode>, g: &Guard) {
        let mut c = from;
        while c != to {
            let next = Self::node(c).next.load(Ordering::Acquire, g);
            debug_assert!(is_marked(next), "retiring a node with a clean successor word");
            g.defer_destroy(c);
            c = unmarked(next);
        }
    }

    /// Returns adjacent `(left, right)` with `right` the first active,
    /// non-moving node whose key is `>= key` (or the tail). Moving nodes found
    /// between them are unlinked first.
    pub fn search<'g>(&self, key: Key, g: &'g Guard) -> (Shared<'g, LeaderNode>, Shared<'g, LeaderNode>) {
        let tail = self.tail();
        loop {
            let mut x = self.head();
            let mut x_next = Self::node(x).next.load(Ordering::Acquire, g);
            let mut l_node = x;
            let mut l_node_next = Shared::null();
            loop {
                if !is_moving(x_next) {
                    l_node = x;
                    l_node_next = not_logdel(x_next);
                }
                x = unmarked(x_next);
                if x == tail {
                    break;
                }
                let prev_log_del = is_logdel(x_next);
                x_next = Self::node(x).next.load(Ordering::Acquire, g);
                if Self::node(x).key >= key && !is_moving(x_next) && !prev_log_del {
                    break;
                }
            }
            let r_node = x;
            let l = Self::node(l_node);
            let unusable = |g: &'g Guard| {
                is_logdel(l.next.load(Ordering::Acquire, g))
                    || (r_node != tail && is_moving(Self::node(r_node).next.load(Ordering::Acquire, g)))
            };

            if l_node_next == r_node {
                if unusable(g) {
                    continue;
                }
                return (l_node, r_node);
            }
            if l
                .next
                .compare_exchange(l_node_next, r_node, Ordering::AcqRel, Ordering::Acquire, g)
                .is_ok()
            {
                unsafe { self.retire_chain(l_node_next, r_node, g) };
                if unusable(g) {
                    continue;
                }
                return (l_node, r_node);
            }
        }
    }

    /// Links `(key, val, tid)` into the list and raises `largest` when the new
    /// key is strictly greater than the one it designates.
    pub fn insert<'g>(
        &self,
        largest: &LargestHandle,
        key: Key,
        val: Value,
        tid: ThreadId,
        g: &'g Guard,
    ) -> Shared<'g, LeaderNode> {
        let mut new = Owned::new(LeaderNode::new(key, val, tid));
        loop {
            let (l_node, r_node) = self.search(key, g);
            new.next.store(r_node, Ordering::Relaxed);
            match Self::node(l_node).next.compare_exchange(
                r_node,
                new,
                Ordering::AcqRel,
                Ordering::Acquire,
                g,
            ) {
                Ok(n) => {
                    if largest.key().is_none_or(|k| key > k) {
                        largest.publish(n);
                    }
                    return n;
                }
                Err(e) => new = e.new,
            }
        }
    }

    /// Logically deletes the first active node and returns it, or `None` when
    /// only deleted nodes precede the tail. Once the traversed prefix exceeds
    /// `max_offset`, `head` is swung past it and the prefix is retired.
    pub fn delete_min(&self, g: &Guard) -> Option<DeletedMin> {
        let head = self.head();
        let tail = self.tail();
        let mut offset = 0usize;
        let mut x = head;
        loop {
            offset += 1;
            let x_next = Self::node(x).next.load(Ordering::Acquire, g);
            if unmarked(x_next) == tail {
                return None;
            }
            if is_logdel(x_next) {
                x = not_logdel(x_next);
                continue;
            }
            let old = Self::node(x).next.fetch_or(LOGDEL, Ordering::AcqRel, g);
            if is_logdel(old) {
                x = not_logdel(old);
                continue;
            }
            let target = unmarked(old);
            if target == tail {
                // The only candidate was a moving node unlinked under us.
                Self::node(x).next.store(tail, Ordering::Release);
                return None;
            }
            x = target;
            break;
        }

        let new_head = x;
        let n = Self::node(new_head);
        let prev = n.claim.fetch_or(CLAIM_DELMIN, Ordering::SeqCst);
        if prev & CLAIM_MOVING != 0 {
            self.claim_conflicts.fetch_add(1, Ordering::Relaxed);
            log::error!("leader node {} claimed by delete-min and demotion", n.key);
        }

        if offset > self.max_offset {
            let old = Self::node(head)
                .next
                .swap(with_logdel(new_head), Ordering::AcqRel, g);
            let mut c = unmarked(old);
            while c != new_head {
                let next = Self::node(c).next.load(Ordering::Acquire, g);
                debug_assert!(is_logdel(next));
                unsafe { g.defer_destroy(c) };
                c = unmarked(next);
            }
        }

        Some(DeletedMin {
            key: n.key,
            val: n.val,
            tid: n.tid,
            addr: new_head.as_raw() as usize,
        })
    }

    /// Finds the demotion target for `tid`: the active, non-moving `tid` node
    /// at `start`, or the last such node if `start` is gone. Resets `largest`
    /// to the nearest preceding active `tid` node and returns the target with
    /// its immediate predecessor.
    fn search_delete<'g>(
        &self,
        largest: &LargestHandle,
        start: Option<usize>,
        tid: ThreadId,
        g: &'g Guard,
    ) -> Option<(Shared<'g, LeaderNode>, Shared<'g, LeaderNode>)> {
        let tail = self.tail();
        loop {
            let mut x = self.head();
            let mut x_next = Self::node(x).next.load(Ordering::Acquire, g);
            let mut cur_l = x;
            let mut cur_l_next = Shared::null();
            let mut found: Option<(Shared<'g, LeaderNode>, Shared<'g, LeaderNode>, Shared<'g, LeaderNode>)> =
                None;
            let mut new_largest = None;
            loop {
                if !is_moving(x_next) {
                    cur_l = x;
                    cur_l_next = not_logdel(x_next);
                }
                let deleted = is_logdel(x_next);
                x = unmarked(x_next);
                if x == tail {
                    break;
                }
                x_next = Self::node(x).next.load(Ordering::Acquire, g);
                if !is_moving(x_next) && !deleted && Self::node(x).tid == tid {
                    new_largest = found.map(|f| f.2);
                    found = Some((cur_l, cur_l_next, x));
                    if Some(x.as_raw() as usize) == start {
                        break;
                    }
                }
            }

            let Some((l_node, l_node_next, r_node)) = found else {
                largest.clear();
                return None;
            };
            match new_largest {
                Some(n) => largest.publish(n),
                None => largest.clear(),
            }

            if l_node_next == r_node {
                return Some((l_node, r_node));
            }
            if Self::node(l_node)
                .next
                .compare_exchange(l_node_next, r_node, Ordering::AcqRel, Ordering::Acquire, g)
                .is_ok()
            {
                unsafe { self.retire_chain(l_node_next, r_node, g) };
                return Some((l_node, r_node));
            }
        }
    }

    /// Unlinks `target` (already marked moving) if it is still reachable.
    fn search_phys_del(&self, target: Shared<'_, LeaderNode>, g: &Guard) {
        let tail = self.tail();
        loop {
            let mut x = self.head();
            let mut x_next = Self::node(x).next.load(Ordering::Acquire, g);
            let mut l_node = x;
            let mut l_node_next = Shared::null();
            let mut found = false;
            loop {
                if !is_moving(x_next) {
                    l_node = x;
                    l_node_next = not_logdel(x_next);
                }
                x = unmarked(x_next);
                if x == tail {
                    break;
                }
                if x == target {
                    found = true;
                }
                let prev_log_del = is_logdel(x_next);
                x_next = Self::node(x).next.load(Ordering::Acquire, g);
                if found && !is_moving(x_next) && !prev_log_del {
                    break;
                }
            }
            if !found {
                // Another traversal already unlinked it.
                return;
            }
            let r_node = x;
            if Self::node(l_node)
                .next
                .compare_exchange(l_node_next, r_node, Ordering::AcqRel, Ordering::Acquire, g)
                .is_ok()
            {
                unsafe { self.retire_chain(l_node_next, r_node, g) };
                return;
            }
        }
    }

    /// Removes the node designated by `largest` (the largest-key active node
    /// owned by `tid`) and returns its pair. `largest` is moved to the
    /// nearest preceding `tid` node. Returns `None` only when `tid` owns no
    /// active node.
    pub fn delete_max_of(&self, largest: &LargestHandle, tid: ThreadId, g: &Guard) -> Option<(Key, Value)> {
        let start = largest.addr();
        let (l_node, r_node, r_next) = loop {
            let (l_node, r_node) = self.search_delete(largest, start, tid, g)?;
            let r = Self::node(r_node);
            let r_next = r.next.load(Ordering::Acquire, g);
            if !is_marked(r_next)
                && r
                    .next
                    .compare_exchange(r_next, with_moving(r_next), Ordering::AcqRel, Ordering::Acquire, g)
                    .is_ok()
            {
                break (l_node, r_node, r_next);
            }
        };

        let r = Self::node(r_node);
        let prev = r.claim.fetch_or(CLAIM_MOVING, Ordering::SeqCst);
        if prev & CLAIM_DELMIN != 0 {
            self.claim_conflicts.fetch_add(1, Ordering::Relaxed);
            log::error!("leader node {} claimed by demotion and delete-min", r.key);
        }

        if Self::node(l_node)
            .next
            .compare_exchange(r_node, r_next, Ordering::AcqRel, Ordering::Acquire, g)
            .is_ok()
        {
            unsafe { g.defer_destroy(r_node) };
        } else {
            self.search_phys_del(r_node, g);
        }
        Some((r.key, r.val))
    }

    /// Reachable nodes between the sentinels. Intended for quiescent audits
    /// and tests; concurrent callers see an arbitrary mix of states.
    pub fn snapshot(&self) -> Vec<NodeView> {
        let g = epoch::pin();
        let tail = self.tail();
        let mut out = Vec::new();
        let mut w = Self::node(self.head()).next.load(Ordering::Acquire, &g);
        while unmarked(w) != tail {
            let x = unmarked(w);
            let n = Self::node(x);
            let next = n.next.load(Ordering::Acquire, &g);
            out.push(NodeView {
                key: n.key,
                val: n.val,
                tid: n.tid,
                deleted: is_logdel(w),
                moving: is_moving(next),
                marks_successor: is_logdel(next),
                addr: x.as_raw() as usize,
            });
            w = next;
        }
        out
    }

    /// Keys of the active (not deleted, not moving) nodes in list order.
    pub fn active_keys(&self) -> Vec<Key> {
        self.snapshot()
            .into_iter()
            .filter(|n| !n.deleted && !n.moving)
            .map(|n| n.key)
            .collect()
    }

    /// Renders each reachable node as `key(tid)` with `[D]`, `[M]` or
    /// `[DM]` appended when it is deleted and/or moving.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.snapshot().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{}({})", n.key, n.tid);
            if n.deleted || n.moving {
                s.push('[');
                if n.deleted {
                    s.push('D');
                }
                if n.moving {
                    s.push('M');
                }
                s.push(']');
            }
        }
        s
    }
}

impl fmt::Debug for LeaderList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LeaderList")
            .field("max_offset", &self.max_offset)
            .field("nodes", &self.dump())
            .finish()
    }
}

impl Drop for LeaderList {
    fn drop(&mut self) {
        // SAFETY: `&mut self` means no traversal is in flight; every node still
        // reachable from head is owned by the list alone.
        unsafe {
            let g = epoch::unprotected();
            let mut c = Shared::from(self.head as *const LeaderNode);
            while !c.is_null() {
                let next = unmarked(c.deref().next.load(Ordering::Relaxed, g));
                drop(c.into_owned());
                c = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(list: &LeaderList) -> Vec<Key> {
        list.active_keys()
    }

    #[test]
    fn mark_bits() {
        let g = epoch::pin();
        let node = Owned::new(LeaderNode::new(1, 1, 0)).into_shared(&g);
        assert!(!is_logdel(node) && !is_moving(node));
        assert!(is_logdel(with_logdel(node)));
        assert_eq!(with_logdel(node).tag(), 0b01);
        assert_eq!(with_moving(node).tag(), 0b10);
        assert_eq!(unmarked(with_moving(node)), unmarked(node));
        assert_eq!(not_logdel(with_logdel(with_moving(node))), with_moving(node));
        assert_eq!(unmarked(with_logdel(with_moving(node))).as_raw(), node.as_raw());
        unsafe { drop(node.into_owned()) };
    }

    #[test]
    fn insert_single_sets_largest() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        let n = list.insert(&h, 7, 70, 0, &g);
        assert_eq!(keys(&list), vec![7]);
        assert_eq!(h.key(), Some(7));
        assert_eq!(h.addr(), Some(n.as_raw() as usize));
        assert_eq!(list.dump(), "7(0)");
    }

    #[test]
    fn inserts_are_sorted_and_track_largest() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        list.insert(&h, 7, 0, 0, &g);
        list.insert(&h, 3, 0, 0, &g);
        let nine = list.insert(&h, 9, 0, 0, &g);
        assert_eq!(keys(&list), vec![3, 7, 9]);
        assert_eq!(h.addr(), Some(nine.as_raw() as usize));
        assert_eq!(h.key(), Some(9));
    }

    #[test]
    fn equal_keys_go_before_older_ones() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        list.insert(&h, 5, 1, 0, &g);
        list.insert(&h, 5, 2, 0, &g);
        let vals: Vec<_> = list.snapshot().iter().map(|n| n.val).collect();
        assert_eq!(vals, vec![2, 1]);
        // the first-inserted node stays the largest
        assert_eq!(h.addr(), Some(list.snapshot()[1].addr));
    }

    #[test]
    fn search_brackets_key() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        let three = list.insert(&h, 3, 0, 0, &g);
        let seven = list.insert(&h, 7, 0, 0, &g);
        let (l, r) = list.search(5, &g);
        assert_eq!((l, r), (three, seven));
        let (l, r) = list.search(3, &g);
        assert_eq!(l, list.head());
        assert_eq!(r, three);
        let (l, r) = list.search(99, &g);
        assert_eq!((l, r), (seven, list.tail()));
    }

    #[test]
    fn search_skips_deleted_prefix() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        let two = list.insert(&h, 2, 0, 0, &g);
        let five = list.insert(&h, 5, 0, 0, &g);
        assert_eq!(list.delete_min(&g).unwrap().key, 2);
        // 2 is deleted; a new key 1 lands right after it, before 5
        let (l, r) = list.search(1, &g);
        assert_eq!((l, r), (two, five));
        list.insert(&h, 1, 0, 0, &g);
        assert_eq!(list.dump(), "2(0)[D] 1(0) 5(0)");
        assert_eq!(list.delete_min(&g).unwrap().key, 1);
    }

    #[test]
    fn delete_min_returns_minimum_then_empty() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        for k in [9, 2, 5] {
            list.insert(&h, k, k * 10, 3, &g);
        }
        let d = list.delete_min(&g).unwrap();
        assert_eq!((d.key, d.val, d.tid), (2, 20, 3));
        assert_eq!(list.dump(), "2(3)[D] 5(3) 9(3)");
        assert_eq!(list.delete_min(&g).unwrap().key, 5);
        assert_eq!(list.delete_min(&g).unwrap().key, 9);
        assert_eq!(list.delete_min(&g), None);
        assert_eq!(list.delete_min(&g), None);
        assert_eq!(LeaderList::new(4).delete_min(&g), None);
    }

    #[test]
    fn prefix_unlinked_after_max_offset() {
        let list = LeaderList::new(2);
        let h = LargestHandle::new();
        let g = epoch::pin();
        for k in 1..=5 {
            list.insert(&h, k, 0, 0, &g);
        }
        list.delete_min(&g).unwrap(); // offset 1
        list.delete_min(&g).unwrap(); // offset 2
        assert_eq!(list.dump(), "1(0)[D] 2(0)[D] 3(0) 4(0) 5(0)");
        list.delete_min(&g).unwrap(); // offset 3 > 2: swing
        assert_eq!(list.dump(), "3(0)[D] 4(0) 5(0)");
        list.delete_min(&g).unwrap(); // offset 2
        assert_eq!(list.dump(), "3(0)[D] 4(0)[D] 5(0)");
    }

    #[test]
    fn delete_max_resets_largest_to_predecessor() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        let three = list.insert(&h, 3, 30, 0, &g);
        list.insert(&h, 8, 80, 0, &g);
        assert_eq!(list.delete_max_of(&h, 0, &g), Some((8, 80)));
        assert_eq!(h.addr(), Some(three.as_raw() as usize));
        assert_eq!(keys(&list), vec![3]);
        assert_eq!(list.dump(), "3(0)");
    }

    #[test]
    fn delete_max_with_interleaved_owners() {
        let list = LeaderList::new(32);
        let h0 = LargestHandle::new();
        let h1 = LargestHandle::new();
        let g = epoch::pin();
        let two = list.insert(&h0, 2, 0, 0, &g);
        list.insert(&h1, 4, 0, 1, &g);
        list.insert(&h0, 6, 0, 0, &g);
        assert_eq!(list.dump(), "2(0) 4(1) 6(0)");
        assert_eq!(list.delete_max_of(&h0, 0, &g), Some((6, 0)));
        assert_eq!(h0.addr(), Some(two.as_raw() as usize));
        assert_eq!(list.dump(), "2(0) 4(1)");
        assert_eq!(h1.key(), Some(4));
    }

    #[test]
    fn moving_node_is_unlinked_by_search() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        list.insert(&h, 3, 0, 0, &g);
        let six = list.insert(&h, 6, 0, 0, &g);
        let seven = list.insert(&h, 7, 0, 0, &g);
        // mark 6 moving by hand, as a stalled demotion would
        let n = LeaderList::node(six);
        let w = n.next.load(Ordering::Acquire, &g);
        n.next.store(with_moving(w), Ordering::Release);
        assert_eq!(list.dump(), "3(0) 6(0)[M] 7(0)");
        let (l, r) = list.search(5, &g);
        assert_eq!(LeaderList::node(l).key, 3);
        assert_eq!(r, seven);
        assert_eq!(list.dump(), "3(0) 7(0)");
    }

    #[test]
    fn phys_del_of_already_unlinked_node_is_noop() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        list.insert(&h, 1, 0, 0, &g);
        let two = list.insert(&h, 2, 0, 0, &g);
        let n = LeaderList::node(two);
        let w = n.next.load(Ordering::Acquire, &g);
        n.next.store(with_moving(w), Ordering::Release);
        list.search(10, &g); // unlinks 2
        assert_eq!(list.dump(), "1(0)");
        list.search_phys_del(two, &g);
        assert_eq!(list.dump(), "1(0)");
    }

    #[test]
    fn delete_max_when_largest_was_deleted() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let g = epoch::pin();
        let five = list.insert(&h, 5, 0, 0, &g);
        let d = list.delete_min(&g).unwrap();
        assert_eq!(d.addr, five.as_raw() as usize);
        h.invalidate(d.addr);
        assert!(h.is_stale());
        assert_eq!(h.key(), None);
        // a stale handle reads as empty, so the next insert takes over
        list.insert(&h, 2, 0, 0, &g);
        assert_eq!(h.key(), Some(2));
        list.insert(&h, 1, 0, 0, &g);
        assert_eq!(list.delete_max_of(&h, 0, &g), Some((2, 0)));
        assert_eq!(h.key(), Some(1));
    }

    #[test]
    fn publish_of_deleted_node_goes_stale() {
        let list = LeaderList::new(32);
        let h = LargestHandle::new();
        let other = LargestHandle::new();
        let g = epoch::pin();
        let n = list.insert(&other, 4, 0, 0, &g);
        list.delete_min(&g).unwrap();
        h.publish(n);
        assert!(h.is_stale());
    }

    #[test]
    fn concurrent_inserts_keep_order() {
        use std::sync::Arc;
        let list = Arc::new(LeaderList::new(8));
        let hs: Vec<_> = (0..4)
            .map(|t| {
                let list = Arc::clone(&list);
                std::thread::spawn(move || {
                    let h = LargestHandle::new();
                    for i in 0..500u64 {
                        let g = epoch::pin();
                        list.insert(&h, (i * 7919 + t * 13) % 1000, i, t as usize, &g);
                    }
                    h.key()
                })
            })
            .collect();
        for h in hs {
            assert!(h.join().unwrap().is_some());
        }
        let k = keys(&list);
        assert_eq!(k.len(), 2000);
        assert!(k.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn concurrent_insert_and_demote_conserve() {
        use std::collections::BTreeMap;
        use std::sync::Arc;
        let list = Arc::new(LeaderList::new(4));
        let hs: Vec<_> = (0..3usize)
            .map(|t| {
                let list = Arc::clone(&list);
                std::thread::spawn(move || {
                    let h = LargestHandle::new();
                    let mut mine = Vec::new();
                    let mut out = Vec::new();
                    let mut count = 0;
                    for i in 0..3000u64 {
                        let g = epoch::pin();
                        let k = (i * 2654435761 + t as u64 * 97) % 10_000;
                        let v = (t as u64) << 32 | i;
                        list.insert(&h, k, v, t, &g);
                        mine.push((k, v));
                        count += 1;
                        if count > 6 {
                            let got = list.delete_max_of(&h, t, &g).unwrap();
                            count -= 1;
                            out.push(got);
                        }
                        // the handle always names this thread's largest active key
                        let own_max = list
                            .snapshot()
                            .into_iter()
                            .filter(|n| n.tid == t && !n.deleted && !n.moving)
                            .map(|n| n.key)
                            .max();
                        assert_eq!(h.key(), own_max);
                    }
                    (mine, out)
                })
            })
            .collect();
        let mut inserted = Vec::new();
        let mut out = Vec::new();
        for h in hs {
            let (a, b) = h.join().unwrap();
            inserted.extend(a);
            out.extend(b);
        }
        let g = epoch::pin();
        while let Some(d) = list.delete_min(&g) {
            out.push((d.key, d.val));
        }
        let tally = |v: Vec<(u64, u64)>| {
            let mut m: BTreeMap<(u64, u64), usize> = BTreeMap::new();
            for p in v {
                *m.entry(p).or_default() += 1;
            }
            m
        };
        assert_eq!(tally(inserted), tally(out));
        assert_eq!(list.claim_conflicts(), 0);
    }

    #[derive(Debug, Clone)]
    enum LOp {
        Insert(Key, ThreadId),
        DeleteMin,
        DeleteMax(ThreadId),
    }

    fn lop() -> impl proptest::strategy::Strategy<Value = LOp> {
        use proptest::prelude::*;
        prop_oneof![
            3 => (0u64..30, 0usize..3).prop_map(|(k, t)| LOp::Insert(k, t)),
            1 => Just(LOp::DeleteMin),
            1 => (0usize..3).prop_map(LOp::DeleteMax),
        ]
    }

    proptest::proptest! {
        #[test]
        fn sequential_ops_keep_structure_and_match_model(
            ops in proptest::collection::vec(lop(), 0..120),
            max_offset in 1usize..6,
        ) {
            use proptest::prelude::*;
            let list = LeaderList::new(max_offset);
            let handles: Vec<LargestHandle> = (0..3).map(|_| LargestHandle::new()).collect();
            let mut model: Vec<(Key, Value, ThreadId)> = Vec::new();
            for (i, op) in ops.into_iter().enumerate() {
                let g = epoch::pin();
                match op {
                    LOp::Insert(k, t) => {
                        list.insert(&handles[t], k, i as Value, t, &g);
                        model.push((k, i as Value, t));
                    }
                    LOp::DeleteMin => {
                        let got = list.delete_min(&g);
                        let want = model.iter().map(|e| e.0).min();
                        prop_assert_eq!(got.as_ref().map(|d| d.key), want);
                        if let Some(d) = got {
                            handles[d.tid].invalidate(d.addr);
                            let at = model.iter().position(|e| (e.0, e.1, e.2) == (d.key, d.val, d.tid));
                            prop_assert!(at.is_some());
                            model.swap_remove(at.unwrap());
                        }
                    }
                    LOp::DeleteMax(t) => {
                        let got = list.delete_max_of(&handles[t], t, &g);
                        let want = model.iter().filter(|e| e.2 == t).map(|e| e.0).max();
                        prop_assert_eq!(got.map(|p| p.0), want);
                        if let Some((k, v)) = got {
                            let at = model.iter().position(|e| (e.0, e.1, e.2) == (k, v, t));
                            prop_assert!(at.is_some());
                            model.swap_remove(at.unwrap());
                        }
                    }
                }
                drop(g);

                // deleted prefix, then sorted active suffix; never both marks
                let snap = list.snapshot();
                let first_active = snap.iter().position(|n| !n.deleted).unwrap_or(snap.len());
                prop_assert!(snap[first_active..].iter().all(|n| !n.deleted));
                prop_assert!(snap.iter().all(|n| !(n.deleted && n.moving) && !n.moving));
                let active = list.active_keys();
                prop_assert!(active.windows(2).all(|w| w[0] <= w[1]));
                let mut want: Vec<Key> = model.iter().map(|e| e.0).collect();
                want.sort_unstable();
                prop_assert_eq!(active, want);
                prop_assert_eq!(list.claim_conflicts(), 0);
                for (t, h) in handles.iter().enumerate() {
                    if let Some(k) = h.addr().map(|_| h.key()) {
                        let max = model.iter().filter(|e| e.2 == t).map(|e| e.0).max();
                        prop_assert_eq!(k, max, "handle of thread {}", t);
                    }
                }
            }
        }
    }
}
