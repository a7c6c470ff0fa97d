//! Fan-out of telemetry to clients and the input handoff back to the loop.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::wire::{ConfigSnapshot, WireMessage, WIRE_VERSION};
use crate::mpmi::Mode;

/// Bounded outgoing queue of one client. A full queue drops its oldest
/// message.
#[derive(Debug)]
pub struct ClientQueue {
    inner: Mutex<VecDeque<String>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    closed: AtomicBool,
}

impl ClientQueue {
    fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            capacity,
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        }
    }

    pub fn push(&self, text: String) {
        let mut q = self.inner.lock().expect("queue lock");
        if q.len() == self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(text);
        self.ready.notify_one();
    }

    /// Everything queued, waiting up to `timeout` for the first message.
    pub fn drain_timeout(&self, timeout: Duration) -> Vec<String> {
        let q = self.inner.lock().expect("queue lock");
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty() && !self.closed.load(Ordering::Relaxed))
            .expect("queue lock");
        q.drain(..).collect()
    }

    pub fn drain(&self) -> Vec<String> {
        self.inner.lock().expect("queue lock").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Relaxed);
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
struct HubState {
    clients: Vec<Arc<ClientQueue>>,
    last_tick: u64,
    snapshot: Option<ConfigSnapshot>,
}

/// One writer, many readers. Publishing never waits on a client.
#[derive(Debug)]
pub struct Hub {
    state: Mutex<HubState>,
    capacity: usize,
    server: String,
}

impl Hub {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(HubState::default()),
            capacity: capacity.max(1),
            server: format!("mpmi {}", env!("CARGO_PKG_VERSION")),
        }
    }

    /// Registers a client; its queue starts with `hello` and the current
    /// config snapshot.
    pub fn subscribe(&self) -> Arc<ClientQueue> {
        let mut st = self.state.lock().expect("hub lock");
        let q = Arc::new(ClientQueue::new(self.capacity));
        q.push(
            WireMessage::Hello {
                tick_index: st.last_tick,
                version: WIRE_VERSION,
                server: self.server.clone(),
            }
            .to_json(),
        );
        if let Some(s) = &st.snapshot {
            let mut s = s.clone();
            s.tick_index = st.last_tick;
            q.push(WireMessage::ConfigSnapshot(s).to_json());
        }
        st.clients.push(q.clone());
        q
    }

    /// Stores the snapshot for late joiners and sends it to current clients.
    pub fn set_snapshot(&self, snapshot: ConfigSnapshot) {
        let msg = WireMessage::ConfigSnapshot(snapshot.clone());
        self.state.lock().expect("hub lock").snapshot = Some(snapshot);
        self.publish(&msg);
    }

    pub fn publish(&self, msg: &WireMessage) {
        let mut st = self.state.lock().expect("hub lock");
        st.last_tick = st.last_tick.max(msg.tick_index());
        st.clients.retain(|c| !c.is_closed());
        if st.clients.is_empty() {
            return;
        }
        let text = msg.to_json();
        for c in &st.clients {
            c.push(text.clone());
        }
    }

    pub fn client_count(&self) -> usize {
        let mut st = self.state.lock().expect("hub lock");
        st.clients.retain(|c| !c.is_closed());
        st.clients.len()
    }

    /// Messages dropped across connected clients.
    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("hub lock").clients.iter().map(|c| c.dropped()).sum()
    }

    pub fn close_all(&self) {
        for c in self.state.lock().expect("hub lock").clients.drain(..) {
            c.close();
        }
    }
}

#[derive(Debug, Default)]
struct Pending {
    input: Option<(Vec<f64>, f64)>,
    mode: Option<Mode>,
}

/// Latest client input and mode request, last writer wins. The loop takes
/// each at most once.
#[derive(Debug)]
pub struct InputHandoff {
    dims: usize,
    pending: Mutex<Pending>,
}

impl InputHandoff {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            pending: Mutex::new(Pending::default()),
        }
    }

    /// Handles one client frame. Errors are returned as the message to send
    /// back; the frame is then ignored.
    pub fn receive(&self, text: &str, tick_index: u64) -> Result<(), WireMessage> {
        let error = |message: String| WireMessage::Error { tick_index, message };
        match WireMessage::from_json(text).map_err(|e| error(format!("malformed message: {e}")))? {
            WireMessage::Input { u, client_time, .. } => {
                if u.len() != self.dims {
                    return Err(error(format!("input needs {} components, got {}", self.dims, u.len())));
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(error("input contains a non-finite component".into()));
                }
                self.pending.lock().expect("handoff lock").input = Some((u, client_time));
                Ok(())
            }
            WireMessage::ModeSet { mode, .. } => {
                self.pending.lock().expect("handoff lock").mode = Some(mode);
                Ok(())
            }
            other => Err(error(format!("clients may not send {:?}", message_type(&other)))),
        }
    }

    /// The newest input since the last call, with its client timestamp.
    pub fn take_input(&self) -> Option<(Vec<f64>, f64)> {
        self.pending.lock().expect("handoff lock").input.take()
    }

    pub fn take_mode(&self) -> Option<Mode> {
        self.pending.lock().expect("handoff lock").mode.take()
    }
}

fn message_type(m: &WireMessage) -> String {
    let v = serde_json::to_value(m).expect("serializes");
    v["type"].as_str().unwrap_or("unknown").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(u: &[f64], time: f64) -> String {
        WireMessage::Input {
            tick_index: 0,
            client_time: time,
            u: u.to_vec(),
        }
        .to_json()
    }

    #[test]
    fn no_client_publish_is_noop() {
        let hub = Hub::new(4);
        hub.publish(&WireMessage::Error {
            tick_index: 3,
            message: "x".into(),
        });
        assert_eq!(hub.client_count(), 0);
        let q = hub.subscribe();
        let first = WireMessage::from_json(&q.drain()[0]).unwrap();
        assert_eq!(first.tick_index(), 3);
    }

    #[test]
    fn slow_client_drops_oldest() {
        let hub = Hub::new(3);
        let q = hub.subscribe();
        for k in 0..10 {
            hub.publish(&WireMessage::Error {
                tick_index: k,
                message: String::new(),
            });
        }
        let got: Vec<u64> = q.drain().iter().map(|t| WireMessage::from_json(t).unwrap().tick_index()).collect();
        assert_eq!(got, vec![7, 8, 9]);
        assert_eq!(q.dropped(), 8);
    }

    #[test]
    fn last_writer_wins() {
        let h = InputHandoff::new(1);
        h.receive(&input(&[0.1], 1.0), 0).unwrap();
        h.receive(&input(&[0.7], 2.0), 0).unwrap();
        assert_eq!(h.take_input(), Some((vec![0.7], 2.0)));
        assert_eq!(h.take_input(), None);
    }

    #[test]
    fn malformed_input_is_reported() {
        let h = InputHandoff::new(1);
        assert!(matches!(h.receive("{not json", 4), Err(WireMessage::Error { tick_index: 4, .. })));
        assert!(h.receive(&input(&[0.1, 0.2], 0.0), 0).is_err());
        assert!(h.receive(r#"{"type":"input","tick_index":0,"client_time":0,"u":["a"]}"#, 0).is_err());
        let hello = WireMessage::Hello {
            tick_index: 0,
            version: 1,
            server: String::new(),
        };
        assert!(matches!(h.receive(&hello.to_json(), 0), Err(WireMessage::Error { message, .. }) if message.contains("hello")));
        assert_eq!(h.take_input(), None);
        h.receive(r#"{"type":"mode_set","tick_index":0,"client_time":1.5,"mode":"user_only"}"#, 0).unwrap();
        assert_eq!(h.take_mode(), Some(Mode::UserOnly));
    }
}
