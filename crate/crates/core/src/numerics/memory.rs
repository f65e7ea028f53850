//! Attention-memory instrumentation.
//!
//! Every attention call reports how many score cells it materialised. A
//! [`Recorder`] collects those reports on the current thread while it is
//! alive; with no recorder active the hook is a no-op.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionSite {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
}

impl AttentionSite {
    pub const OTHER: AttentionSite = AttentionSite {
        kind: AttentionKind::Other,
        layer: 0,
        head: 0,
    };

    pub fn new(kind: AttentionKind, layer: usize, head: usize) -> Self {
        AttentionSite { kind, layer, head }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionEvent {
    pub site: AttentionSite,
    pub query_len: usize,
    pub key_len: usize,
}

impl AttentionEvent {
    pub fn entries(&self) -> u64 {
        (self.query_len * self.key_len) as u64
    }
}

thread_local! {
    static ACTIVE: RefCell<Vec<Vec<AttentionEvent>>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn report(event: AttentionEvent) {
    ACTIVE.with(|stack| {
        for frame in stack.borrow_mut().iter_mut() {
            frame.push(event);
        }
    });
}

/// Collects attention events on this thread until [`Recorder::finish`].
/// Recorders nest; an event is seen by every active recorder.
pub struct Recorder {
    depth: usize,
}

impl Recorder {
    pub fn start() -> Self {
        let depth = ACTIVE.with(|stack| {
            let mut stack = stack.borrow_mut();
            stack.push(Vec::new());
            stack.len()
        });
        Recorder { depth }
    }

    pub fn finish(self) -> Vec<AttentionEvent> {
        let events = ACTIVE.with(|stack| {
            let mut stack = stack.borrow_mut();
            assert_eq!(stack.len(), self.depth, "recorders finished out of order");
            stack.pop().unwrap_or_default()
        });
        std::mem::forget(self);
        events
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        ACTIVE.with(|stack| {
            let mut stack = stack.borrow_mut();
            if stack.len() == self.depth {
                stack.pop();
            }
        });
    }
}

/// Sum of entries over events matching `kind`.
pub fn total_entries(events: &[AttentionEvent], kind: AttentionKind) -> u64 {
    events
        .iter()
        .filter(|e| e.site.kind == kind)
        .map(AttentionEvent::entries)
        .sum()
}
