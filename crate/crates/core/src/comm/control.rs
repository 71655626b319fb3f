//! Control plane: reliable per-sender FIFO command channels from the
//! engine to each worker, separate from the data plane.

use crossbeam::channel::{unbounded, Receiver, Sender};

use crate::error::{Error, Result};

/// Engine-side handle to every worker's inbox.
pub struct ControlHub<T> {
    senders: Vec<Sender<T>>,
}

/// Worker-side inbox, consumed by one dispatcher per worker.
pub struct ControlEndpoint<T> {
    pub worker_id: usize,
    rx: Receiver<T>,
}

/// Create the hub plus one endpoint per worker.
pub fn control_channels<T>(workers: usize) -> (ControlHub<T>, Vec<ControlEndpoint<T>>) {
    let mut senders = Vec::with_capacity(workers);
    let mut endpoints = Vec::with_capacity(workers);
    for worker_id in 0..workers {
        let (tx, rx) = unbounded();
        senders.push(tx);
        endpoints.push(ControlEndpoint { worker_id, rx });
    }
    (ControlHub { senders }, endpoints)
}

impl<T> ControlHub<T> {
    pub fn send(&self, worker: usize, msg: T) -> Result<()> {
        let tx = self
            .senders
            .get(worker)
            .ok_or_else(|| Error::Delivery {
                worker,
                reason: "no such worker".into(),
            })?;
        tx.send(msg).map_err(|_| Error::Delivery {
            worker,
            reason: "worker disconnected".into(),
        })
    }

    pub fn workers(&self) -> usize {
        self.senders.len()
    }
}

impl<T: Clone> ControlHub<T> {
    pub fn broadcast(&self, msg: &T) -> Result<()> {
        for worker in 0..self.senders.len() {
            self.send(worker, msg.clone())?;
        }
        Ok(())
    }
}

impl<T> ControlEndpoint<T> {
    /// Blocking receive; `None` once the hub is dropped.
    pub fn recv(&self) -> Option<T> {
        self.rx.recv().ok()
    }

    /// Blocking stream of commands until the hub is dropped.
    pub fn serve(&self) -> impl Iterator<Item = T> + '_ {
        self.rx.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_sender_fifo_order() {
        let (hub, endpoints) = control_channels::<u64>(1);
        for key in 0..3 {
            hub.send(0, key).unwrap();
        }
        let got: Vec<u64> = endpoints[0].serve().take(3).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn broadcast_reaches_every_worker() {
        let (hub, endpoints) = control_channels::<&'static str>(4);
        hub.broadcast(&"go").unwrap();
        for ep in &endpoints {
            assert_eq!(ep.recv(), Some("go"));
        }
    }

    #[test]
    fn dead_worker_surfaces_delivery_error() {
        let (hub, mut endpoints) = control_channels::<u64>(2);
        drop(endpoints.remove(1));
        hub.send(0, 1).unwrap();
        let err = hub.send(1, 2).unwrap_err();
        assert!(err.to_string().contains("worker 1"), "{err}");
    }

    #[test]
    fn unknown_worker_is_an_error() {
        let (hub, _eps) = control_channels::<u64>(1);
        assert!(hub.send(5, 0).is_err());
    }
}
