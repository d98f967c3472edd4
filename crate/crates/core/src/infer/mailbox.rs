use std::sync::{Condvar, Mutex};

struct Slot<T> {
    item: Option<T>,
    closed: bool,
    dropped: u64,
}

/// A one-slot mailbox: a new item replaces any item not yet taken.
pub struct LatestWins<T> {
    slot: Mutex<Slot<T>>,
    ready: Condvar,
}

impl<T> Default for LatestWins<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> LatestWins<T> {
    pub fn new() -> Self {
        Self { slot: Mutex::new(Slot { item: None, closed: false, dropped: 0 }), ready: Condvar::new() }
    }

    /// Stores `item`, returning the displaced one. Ignored after `close`.
    pub fn put(&self, item: T) -> Option<T> {
        let mut s = self.slot.lock().expect("mailbox poisoned");
        if s.closed {
            return None;
        }
        let old = s.item.replace(item);
        if old.is_some() {
            s.dropped += 1;
        }
        self.ready.notify_one();
        old
    }

    /// Blocks until an item is available. Returns `None` once the mailbox is
    /// closed and drained.
    pub fn take(&self) -> Option<T> {
        let mut s = self.slot.lock().expect("mailbox poisoned");
        loop {
            if let Some(item) = s.item.take() {
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("mailbox poisoned");
        }
    }

    /// Stops accepting items; a pending item can still be taken.
    pub fn close(&self) {
        self.slot.lock().expect("mailbox poisoned").closed = true;
        self.ready.notify_all();
    }

    pub fn dropped(&self) -> u64 {
        self.slot.lock().expect("mailbox poisoned").dropped
    }
}
