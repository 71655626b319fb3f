//! Rendezvous all-reduce: gather to the lowest rank, sum in ascending rank
//! order, broadcast. Deterministic regardless of arrival order.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
struct SlotState {
    deposits: BTreeMap<usize, Tensor>,
    result: Option<Result<Tensor>>,
    pickups_left: usize,
    shut: bool,
}

/// One reusable reduction rendezvous per communication group.
#[derive(Default)]
pub(crate) struct ReduceSlot {
    state: Mutex<SlotState>,
    cv: Condvar,
}

impl ReduceSlot {
    pub(crate) fn all_reduce(&self, rank: usize, group_size: usize, x: Tensor) -> Result<Tensor> {
        let mut st = self.state.lock().unwrap();
        // wait for the previous round to drain before joining a new one
        while st.result.is_some() && !st.shut {
            st = self.cv.wait(st).unwrap();
        }
        if st.shut {
            return Err(Error::ShutDown);
        }
        if st.deposits.contains_key(&rank) {
            return Err(Error::Protocol(format!(
                "rank {rank} deposited twice in one all_reduce round"
            )));
        }
        st.deposits.insert(rank, x);
        if st.deposits.len() == group_size {
            st.result = Some(Self::sum_in_rank_order(&st.deposits));
            st.pickups_left = group_size;
            self.cv.notify_all();
        } else {
            while st.result.is_none() && !st.shut {
                st = self.cv.wait(st).unwrap();
            }
            if st.shut {
                return Err(Error::ShutDown);
            }
        }
        let out = st.result.as_ref().unwrap().clone();
        st.pickups_left -= 1;
        if st.pickups_left == 0 {
            st.deposits.clear();
            st.result = None;
            self.cv.notify_all();
        }
        out
    }

    fn sum_in_rank_order(deposits: &BTreeMap<usize, Tensor>) -> Result<Tensor> {
        let mut it = deposits.values();
        let first = it.next().expect("non-empty group").clone();
        let mut acc = first;
        for t in it {
            if t.shape() != acc.shape() {
                return Err(Error::Protocol(format!(
                    "all_reduce shape divergence: {:?} vs {:?}",
                    acc.shape(),
                    t.shape()
                )));
            }
            acc = acc.add(t)?;
        }
        Ok(acc)
    }

    pub(crate) fn shutdown(&self) {
        let mut st = self.state.lock().unwrap();
        st.shut = true;
        self.cv.notify_all();
    }
}
