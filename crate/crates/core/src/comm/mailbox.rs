//! Point-to-point data plane: asynchronous send/recv matched by
//! (source, destination, tag), exactly once per triple.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tensor payload plus the sender's virtual-clock timestamp (0 when no cost
/// model is attached to the run).
#[derive(Debug, Clone)]
pub struct Payload {
    pub tensor: Tensor,
    pub vt: f64,
}

/// What a point-to-point transfer can carry: a payload, or a failure marker
/// that tells downstream stages to skip the key.
#[derive(Debug, Clone)]
pub enum MailContent {
    Data(Payload),
    Poison(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleStatus {
    Pending,
    Done,
    Failed,
}

enum HandleState {
    Pending,
    Done(Option<MailContent>),
    Failed(String),
    Taken,
}

struct HandleInner {
    state: Mutex<HandleState>,
    cv: Condvar,
}

/// Completion handle for an asynchronous operation. Transitions from
/// pending to done or failed exactly once.
#[derive(Clone)]
pub struct CompletionHandle {
    inner: Arc<HandleInner>,
}

impl CompletionHandle {
    pub(crate) fn pending() -> Self {
        CompletionHandle {
            inner: Arc::new(HandleInner {
                state: Mutex::new(HandleState::Pending),
                cv: Condvar::new(),
            }),
        }
    }

    pub(crate) fn done(content: Option<MailContent>) -> Self {
        let h = Self::pending();
        h.fulfill(content);
        h
    }

    pub(crate) fn failed(reason: &str) -> Self {
        let h = Self::pending();
        h.fail(reason);
        h
    }

    pub(crate) fn fulfill(&self, content: Option<MailContent>) {
        let mut st = self.inner.state.lock().unwrap();
        if matches!(*st, HandleState::Pending) {
            *st = HandleState::Done(content);
            self.inner.cv.notify_all();
        }
    }

    pub(crate) fn fail(&self, reason: &str) {
        let mut st = self.inner.state.lock().unwrap();
        if matches!(*st, HandleState::Pending) {
            *st = HandleState::Failed(reason.to_string());
            self.inner.cv.notify_all();
        }
    }

    pub fn status(&self) -> HandleStatus {
        match *self.inner.state.lock().unwrap() {
            HandleState::Pending => HandleStatus::Pending,
            HandleState::Done(_) | HandleState::Taken => HandleStatus::Done,
            HandleState::Failed(_) => HandleStatus::Failed,
        }
    }

    /// Block until the operation completes; yields the delivered content
    /// for receives, `None` for sends. Consuming twice is a protocol error.
    pub fn wait(&self) -> Result<Option<MailContent>> {
        let mut st = self.inner.state.lock().unwrap();
        loop {
            match &*st {
                HandleState::Pending => st = self.inner.cv.wait(st).unwrap(),
                HandleState::Failed(reason) => return Err(Error::Protocol(reason.clone())),
                HandleState::Taken => {
                    return Err(Error::Protocol("completion handle consumed twice".into()))
                }
                HandleState::Done(_) => break,
            }
        }
        match std::mem::replace(&mut *st, HandleState::Taken) {
            HandleState::Done(content) => Ok(content),
            _ => unreachable!(),
        }
    }
}

type TripleKey = (usize, usize, u64); // (src, dest, tag)

enum Slot {
    Ready(MailContent),
    Awaited(CompletionHandle),
}

#[derive(Default)]
struct MailboxState {
    slots: HashMap<TripleKey, Slot>,
    shut: bool,
}

/// Shared matching table for all ranks of one fabric.
#[derive(Default)]
pub(crate) struct Mailbox {
    state: Mutex<MailboxState>,
}

impl Mailbox {
    /// Deposit content for (src, dest, tag). Completes a waiting receive if
    /// one is registered; duplicate deposits for an undelivered triple are a
    /// protocol error.
    pub(crate) fn deposit(
        &self,
        src: usize,
        dest: usize,
        tag: u64,
        content: MailContent,
    ) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.shut {
            return Err(Error::ShutDown);
        }
        match st.slots.entry((src, dest, tag)) {
            Entry::Occupied(occ) => match occ.get() {
                Slot::Ready(_) => Err(Error::Protocol(format!(
                    "duplicate send {src}->{dest} tag {tag} while first undelivered"
                ))),
                Slot::Awaited(_) => {
                    let Slot::Awaited(handle) = occ.remove() else {
                        unreachable!()
                    };
                    handle.fulfill(Some(content));
                    Ok(())
                }
            },
            Entry::Vacant(vac) => {
                vac.insert(Slot::Ready(content));
                Ok(())
            }
        }
    }

    /// Register interest in (src, dest, tag); the returned handle resolves
    /// when a matching deposit arrives (or immediately if it already has).
    pub(crate) fn register_recv(&self, src: usize, dest: usize, tag: u64) -> Result<CompletionHandle> {
        let mut st = self.state.lock().unwrap();
        if st.shut {
            return Ok(CompletionHandle::failed("fabric shut down"));
        }
        match st.slots.entry((src, dest, tag)) {
            Entry::Occupied(occ) => match occ.get() {
                Slot::Ready(_) => {
                    let Slot::Ready(content) = occ.remove() else {
                        unreachable!()
                    };
                    Ok(CompletionHandle::done(Some(content)))
                }
                Slot::Awaited(_) => Err(Error::Protocol(format!(
                    "duplicate recv {src}->{dest} tag {tag}"
                ))),
            },
            Entry::Vacant(vac) => {
                let handle = CompletionHandle::pending();
                vac.insert(Slot::Awaited(handle.clone()));
                Ok(handle)
            }
        }
    }

    /// Fail every pending receive and refuse further traffic.
    pub(crate) fn shutdown(&self) {
        let mut st = self.state.lock().unwrap();
        st.shut = true;
        for (_, slot) in st.slots.drain() {
            if let Slot::Awaited(handle) = slot {
                handle.fail("peer shutdown before matching send");
            }
        }
    }
}

/// Convenience for receive paths: unwrap data or surface poison/missing.
pub fn expect_payload(content: Option<MailContent>) -> Result<Payload> {
    match content {
        Some(MailContent::Data(p)) => Ok(p),
        Some(MailContent::Poison(msg)) => Err(Error::Protocol(msg)),
        None => Err(Error::Protocol("expected payload, got completion only".into())),
    }
}
