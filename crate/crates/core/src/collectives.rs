//! In-process simulation of rank-synchronisation primitives.
//!
//! Each simulated rank holds a [`Comm`] and runs on its own thread; the
//! collectives are rendezvous points where the last rank to arrive computes
//! every rank's result in fixed rank order. Collectives are the only channel
//! between ranks. A rank that enters a different collective than its peers,
//! or leaves the group while others wait, poisons the group and every rank
//! observes the error.

use std::any::Any;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

type Payload = Box<dyn Any + Send>;

#[derive(Default)]
struct State {
    phase: u64,
    op: Option<(&'static str, usize)>,
    slots: Vec<Option<Payload>>,
    results: Vec<Option<Payload>>,
    arrived: usize,
    departed: usize,
    draining: bool,
    left: Vec<bool>,
    error: Option<Error>,
}

struct Shared {
    world_size: usize,
    state: Mutex<State>,
    cv: Condvar,
    timeout: Duration,
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::Deadlock(m) => Error::Deadlock(m.clone()),
        Error::Consistency(m) => Error::Consistency(m.clone()),
        other => Error::Protocol(other.to_string().trim_start_matches("protocol error: ").to_string()),
    }
}

/// A group of `world_size` simulated ranks. Every call to [`RankGroup::comms`]
/// or [`RankGroup::run`] starts a fresh communicator world.
pub struct RankGroup {
    world_size: usize,
    timeout: Duration,
}

impl RankGroup {
    pub fn new(world_size: usize) -> Result<Self> {
        Self::with_timeout(world_size, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(world_size: usize, timeout: Duration) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::Config("world_size must be at least 1".into()));
        }
        Ok(Self { world_size, timeout })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// One communicator per rank, in rank order.
    pub fn comms(&self) -> Vec<Comm> {
        let ws = self.world_size;
        let state = State {
            slots: (0..ws).map(|_| None).collect(),
            results: (0..ws).map(|_| None).collect(),
            left: vec![false; ws],
            ..State::default()
        };
        let shared =
            Arc::new(Shared { world_size: ws, state: Mutex::new(state), cv: Condvar::new(), timeout: self.timeout });
        (0..ws).map(|rank| Comm { rank, phase: 0, shared: Arc::clone(&shared) }).collect()
    }

    /// Runs `f` once per rank on scoped threads and returns the per-rank results in rank order.
    pub fn run<R, F>(&self, f: F) -> Vec<Result<R>>
    where
        R: Send,
        F: Fn(&mut Comm) -> Result<R> + Sync,
    {
        let comms = self.comms();
        if comms.len() == 1 {
            let mut c = comms.into_iter().next().unwrap();
            return vec![f(&mut c)];
        }
        thread::scope(|s| {
            let handles: Vec<_> = comms
                .into_iter()
                .map(|mut c| {
                    let f = &f;
                    s.spawn(move || f(&mut c))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("rank thread panicked".into()))))
                .collect()
        })
    }
}

/// One rank's handle on its group.
pub struct Comm {
    rank: usize,
    phase: u64,
    shared: Arc<Shared>,
}

impl Drop for Comm {
    fn drop(&mut self) {
        if let Ok(mut st) = self.shared.state.lock() {
            st.left[self.rank] = true;
        }
        self.shared.cv.notify_all();
    }
}

impl Comm {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    /// Number of collectives this rank has completed.
    pub fn phase(&self) -> u64 {
        self.phase
    }

    fn wait<'a>(
        &self,
        mut st: MutexGuard<'a, State>,
        deadline: Instant,
        what: &str,
        done: impl Fn(&State) -> bool,
    ) -> Result<MutexGuard<'a, State>> {
        loop {
            if let Some(e) = &st.error {
                return Err(clone_err(e));
            }
            if done(&st) {
                return Ok(st);
            }
            let missing: Vec<usize> =
                (0..self.shared.world_size).filter(|&r| st.left[r] && st.slots[r].is_none() && !st.draining).collect();
            if !missing.is_empty() {
                let e = Error::Deadlock(format!(
                    "rank(s) {missing:?} left the group while rank {} waits in {what}",
                    self.rank
                ));
                st.error = Some(clone_err(&e));
                self.shared.cv.notify_all();
                return Err(e);
            }
            let now = Instant::now();
            if now >= deadline {
                let e = Error::Deadlock(format!("rank {} timed out in {what}", self.rank));
                st.error = Some(clone_err(&e));
                self.shared.cv.notify_all();
                return Err(e);
            }
            st = self.shared.cv.wait_timeout(st, deadline - now).map_err(|_| Error::Protocol("poisoned".into()))?.0;
        }
    }

    fn collective<P, R>(
        &mut self,
        kind: &'static str,
        root: usize,
        payload: P,
        combine: impl FnOnce(Vec<P>) -> Result<Vec<R>>,
    ) -> Result<R>
    where
        P: Send + 'static,
        R: Send + 'static,
    {
        let ws = self.shared.world_size;
        if root >= ws {
            return Err(Error::Protocol(format!("{kind}: root {root} outside world of {ws}")));
        }
        let deadline = Instant::now() + self.shared.timeout;
        let st = self.shared.state.lock().map_err(|_| Error::Protocol("poisoned".into()))?;
        let mut st = self.wait(st, deadline, kind, |s| !s.draining)?;

        let fail = |st: &mut MutexGuard<State>, e: Error| {
            st.error = Some(clone_err(&e));
            self.shared.cv.notify_all();
            Err(e)
        };
        if st.phase != self.phase {
            let msg = format!("rank {} at phase {} entered {kind} at group phase {}", self.rank, self.phase, st.phase);
            return fail(&mut st, Error::Protocol(msg));
        }
        match st.op {
            None => st.op = Some((kind, root)),
            Some((k, r)) if (k, r) != (kind, root) => {
                let msg = format!("rank {} called {kind}(root {root}) while peers called {k}(root {r})", self.rank);
                return fail(&mut st, Error::Protocol(msg));
            }
            Some(_) => {}
        }
        st.slots[self.rank] = Some(Box::new(payload));
        st.arrived += 1;

        if st.arrived == ws {
            let payloads: Vec<P> = st
                .slots
                .iter_mut()
                .map(|s| *s.take().expect("all ranks arrived").downcast::<P>().expect("same payload type"))
                .collect();
            match combine(payloads) {
                Ok(results) => {
                    for (slot, r) in st.results.iter_mut().zip(results) {
                        *slot = Some(Box::new(r));
                    }
                    st.draining = true;
                    self.shared.cv.notify_all();
                }
                Err(e) => return fail(&mut st, e),
            }
        } else {
            st = self.wait(st, deadline, kind, |s| s.draining)?;
        }

        let out = st.results[self.rank].take().expect("result for every rank");
        st.departed += 1;
        if st.departed == ws {
            st.arrived = 0;
            st.departed = 0;
            st.draining = false;
            st.op = None;
            st.phase += 1;
            self.shared.cv.notify_all();
        }
        self.phase += 1;
        Ok(*out.downcast::<R>().expect("result type"))
    }

    /// Every rank receives a copy of `root`'s value.
    pub fn broadcast<V: Clone + Send + 'static>(&mut self, value: V, root: usize) -> Result<V> {
        self.collective("broadcast", root, value, move |vals| {
            let n = vals.len();
            let v = vals.into_iter().nth(root).expect("root payload");
            Ok(vec![v; n])
        })
    }

    /// Rank-order concatenation of equally shaped tensors along the first dimension.
    pub fn all_gather<T: Real>(&mut self, t: Tensor<T>) -> Result<Tensor<T>> {
        let ws = self.world_size();
        self.collective("all_gather", 0, t, move |parts| {
            let shape = parts[0].shape().to_vec();
            if let Some(p) = parts.iter().find(|p| p.shape() != shape.as_slice()) {
                return Err(Error::Protocol(format!("all_gather shapes {:?} and {:?} differ", shape, p.shape())));
            }
            let mut out_shape = shape.clone();
            out_shape[0] *= ws;
            let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            let out = Tensor::new(out_shape, data)?;
            Ok(vec![out; ws])
        })
    }

    /// Elementwise mean, summed in rank order.
    pub fn all_reduce_mean<T: Real>(&mut self, t: Tensor<T>) -> Result<Tensor<T>> {
        let ws = self.world_size();
        self.collective("all_reduce_mean", 0, t, move |parts| {
            let shape = parts[0].shape().to_vec();
            if let Some(p) = parts.iter().find(|p| p.shape() != shape.as_slice()) {
                return Err(Error::Protocol(format!("all_reduce shapes {:?} and {:?} differ", shape, p.shape())));
            }
            let mut acc = parts[0].data().to_vec();
            for p in &parts[1..] {
                acc.iter_mut().zip(p.data()).for_each(|(a, &b)| *a += b);
            }
            let n = T::of(ws as f64);
            acc.iter_mut().for_each(|a| *a = *a / n);
            let out = Tensor::new(shape, acc)?;
            Ok(vec![out; ws])
        })
    }

    /// `root` supplies one payload per rank; rank `i` receives payload `i`.
    pub fn scatter<V: Send + 'static>(&mut self, payloads: Option<Vec<V>>, root: usize) -> Result<V> {
        let ws = self.world_size();
        if self.rank == root {
            match &payloads {
                Some(p) if p.len() == ws => {}
                Some(p) => return Err(Error::Protocol(format!("scatter of {} payloads over {ws} ranks", p.len()))),
                None => return Err(Error::Protocol("scatter root supplied no payloads".into())),
            }
        }
        self.collective("scatter", root, payloads, move |mut all| {
            let list = all[root].take().ok_or_else(|| Error::Protocol("scatter root supplied no payloads".into()))?;
            if list.len() != ws {
                return Err(Error::Protocol(format!("scatter of {} payloads over {ws} ranks", list.len())));
            }
            Ok(list)
        })
    }

    /// Blocks until every rank has arrived.
    pub fn barrier(&mut self) -> Result<()> {
        self.collective("barrier", 0, (), |v| Ok(vec![(); v.len()]))
    }
}
