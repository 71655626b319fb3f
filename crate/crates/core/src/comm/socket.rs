//! Local-socket backend for the point-to-point data plane.
//!
//! Every ordered rank pair that exchanges activations gets one Unix socket
//! pair. A sender thread per link drains a queue and writes frames; its
//! completion handles resolve once the bytes hit the socket, so sends stay
//! asynchronous for the caller. A reader thread per link decodes frames
//! and deposits them into the shared mailbox, where tag matching works
//! exactly as in the in-process channel mode.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::os::unix::net::UnixStream;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam::channel::{unbounded, Sender};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mailbox::{CompletionHandle, MailContent, Mailbox, Payload};
use super::wire::{read_frame, write_frame, Frame, KIND_DATA, KIND_FAILURE, KIND_TIMING};

struct SendJob {
    tag: u64,
    content: MailContent,
    handle: CompletionHandle,
}

pub(crate) struct SocketLinks {
    senders: HashMap<(usize, usize), Sender<SendJob>>,
    threads: Vec<JoinHandle<()>>,
}

impl SocketLinks {
    /// Open one socket pair per ordered link and start its sender/reader
    /// threads. Frames received on a link are deposited as (src, dst, tag).
    pub(crate) fn new(links: &[(usize, usize)], mailbox: Arc<Mailbox>) -> Result<SocketLinks> {
        let mut senders = HashMap::new();
        let mut threads = Vec::new();
        for &(src, dst) in links {
            let (write_end, read_end) = UnixStream::pair()?;
            let (tx, rx) = unbounded::<SendJob>();
            senders.insert((src, dst), tx);

            threads.push(std::thread::spawn(move || {
                let mut w = BufWriter::new(&write_end);
                while let Ok(job) = rx.recv() {
                    let frames = match &job.content {
                        MailContent::Data(p) => {
                            let mut fs = Vec::with_capacity(2);
                            if p.vt != 0.0 {
                                fs.push(Frame::timing(job.tag, p.vt));
                            }
                            fs.push(Frame::data(
                                job.tag,
                                p.tensor.shape().to_vec(),
                                p.tensor.data().to_vec(),
                            ));
                            fs
                        }
                        MailContent::Poison(_) => vec![Frame::failure(job.tag)],
                    };
                    let mut ok = true;
                    for f in &frames {
                        if write_frame(&mut w, f).is_err() || w.flush().is_err() {
                            ok = false;
                            break;
                        }
                    }
                    if ok {
                        job.handle.fulfill(None);
                    } else {
                        job.handle.fail("socket write failed");
                    }
                }
                let _ = write_end.shutdown(std::net::Shutdown::Write);
            }));

            let mb = mailbox.clone();
            threads.push(std::thread::spawn(move || {
                let mut r = BufReader::new(read_end);
                let mut pending_vt: HashMap<u64, f64> = HashMap::new();
                loop {
                    let frame = match read_frame(&mut r) {
                        Ok(Some(f)) => f,
                        Ok(None) | Err(_) => break,
                    };
                    let outcome = match frame.kind {
                        KIND_TIMING => {
                            if let Some(&vt) = frame.values.first() {
                                pending_vt.insert(frame.tag, vt);
                            }
                            Ok(())
                        }
                        KIND_DATA => match Tensor::from_vec(frame.shape, frame.values) {
                            Ok(tensor) => {
                                let vt = pending_vt.remove(&frame.tag).unwrap_or(0.0);
                                mb.deposit(src, dst, frame.tag, MailContent::Data(Payload { tensor, vt }))
                            }
                            Err(e) => Err(e),
                        },
                        KIND_FAILURE => mb.deposit(
                            src,
                            dst,
                            frame.tag,
                            MailContent::Poison("upstream stage failure".into()),
                        ),
                        other => Err(Error::Protocol(format!("unknown frame kind {other}"))),
                    };
                    if outcome.is_err() {
                        break; // malformed or duplicate traffic closes the link
                    }
                }
            }));
        }
        Ok(SocketLinks { senders, threads })
    }

    pub(crate) fn send(
        &self,
        src: usize,
        dst: usize,
        tag: u64,
        content: MailContent,
    ) -> Result<CompletionHandle> {
        let tx = self.senders.get(&(src, dst)).ok_or_else(|| {
            Error::Protocol(format!("no socket link configured for {src}->{dst}"))
        })?;
        let handle = CompletionHandle::pending();
        tx.send(SendJob {
            tag,
            content,
            handle: handle.clone(),
        })
        .map_err(|_| Error::ShutDown)?;
        Ok(handle)
    }

    /// Close every link and join the worker threads.
    pub(crate) fn shutdown(&mut self) {
        self.senders.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::mailbox::expect_payload;

    #[test]
    fn tensors_cross_a_real_socket_with_tag_matching() {
        let mailbox = Arc::new(Mailbox::default());
        let mut links = SocketLinks::new(&[(0, 1)], mailbox.clone()).unwrap();

        // recv registered before anything is sent
        let h2 = mailbox.register_recv(0, 1, 2).unwrap();
        let t1 = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t2 = Tensor::from_vec(vec![3], vec![-1.0, -2.0, -3.0]).unwrap();
        // send tags in opposite order of the receives we'll issue
        let s2 = links
            .send(0, 1, 2, MailContent::Data(Payload { tensor: t2.clone(), vt: 1.5 }))
            .unwrap();
        let s1 = links
            .send(0, 1, 1, MailContent::Data(Payload { tensor: t1.clone(), vt: 0.0 }))
            .unwrap();
        s1.wait().unwrap();
        s2.wait().unwrap();

        let p2 = expect_payload(h2.wait().unwrap()).unwrap();
        assert_eq!(p2.tensor.data(), t2.data());
        assert_eq!(p2.vt, 1.5);

        let h1 = mailbox.register_recv(0, 1, 1).unwrap();
        let p1 = expect_payload(h1.wait().unwrap()).unwrap();
        assert_eq!(p1.tensor.data(), t1.data());
        assert_eq!(p1.vt, 0.0);

        links.shutdown();
    }

    #[test]
    fn failure_marker_arrives_as_poison() {
        let mailbox = Arc::new(Mailbox::default());
        let mut links = SocketLinks::new(&[(3, 4)], mailbox.clone()).unwrap();
        let h = mailbox.register_recv(3, 4, 9).unwrap();
        links
            .send(3, 4, 9, MailContent::Poison("boom".into()))
            .unwrap()
            .wait()
            .unwrap();
        match h.wait().unwrap() {
            Some(MailContent::Poison(_)) => {}
            other => panic!("expected poison, got {other:?}"),
        }
        links.shutdown();
    }

    #[test]
    fn unknown_link_is_protocol_error() {
        let mailbox = Arc::new(Mailbox::default());
        let links = SocketLinks::new(&[(0, 1)], mailbox).unwrap();
        assert!(links
            .send(1, 0, 0, MailContent::Poison("x".into()))
            .is_err());
    }
}
