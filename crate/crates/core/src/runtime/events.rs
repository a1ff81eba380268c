//! Job events and the listener bus.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::model::JobState;

/// A persisted state change of one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub job_id: String,
    pub old_state: JobState,
    pub new_state: JobState,
    pub at_ms: u64,
    pub detail: Option<String>,
}

impl fmt::Display for JobEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = self.detail.as_deref().unwrap_or("").replace('\n', " ");
        write!(
            f,
            "event job={} from={} to={} t={} detail={}",
            self.job_id, self.old_state, self.new_state, self.at_ms, detail
        )
    }
}

impl JobEvent {
    /// Parses a line produced by `Display`.
    pub fn parse_line(line: &str) -> Option<JobEvent> {
        let rest = line[line.find("event job=")?..].strip_prefix("event job=")?;
        let (job_id, rest) = rest.split_once(" from=")?;
        let (from, rest) = rest.split_once(" to=")?;
        let (to, rest) = rest.split_once(" t=")?;
        let (t, detail) = rest.split_once(" detail=").unwrap_or((rest, ""));
        Some(JobEvent {
            job_id: job_id.to_string(),
            old_state: from.parse().ok()?,
            new_state: to.parse().ok()?,
            at_ms: t.trim().parse().ok()?,
            detail: (!detail.is_empty()).then(|| detail.to_string()),
        })
    }
}

struct Buffer {
    events: VecDeque<JobEvent>,
    closed: bool,
}

/// One listener's bounded queue. Full queues drop their oldest event.
pub struct Subscription {
    capacity: usize,
    buf: Mutex<Buffer>,
    ready: Condvar,
    dropped: AtomicU64,
}

impl Subscription {
    fn push(&self, ev: &JobEvent) {
        let mut b = self.buf.lock().unwrap_or_else(|p| p.into_inner());
        if b.events.len() >= self.capacity {
            b.events.pop_front();
            let n = self.dropped.fetch_add(1, Ordering::Relaxed) + 1;
            if n.is_power_of_two() {
                warn!(dropped = n, "listener is falling behind; dropping oldest events");
            }
        }
        b.events.push_back(ev.clone());
        self.ready.notify_all();
    }

    /// Takes everything buffered so far.
    pub fn drain(&self) -> Vec<JobEvent> {
        let mut b = self.buf.lock().unwrap_or_else(|p| p.into_inner());
        b.events.drain(..).collect()
    }

    /// Waits up to `timeout` for an event. `None` on timeout or after the
    /// bus is closed and the queue is empty.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<JobEvent> {
        let b = self.buf.lock().unwrap_or_else(|p| p.into_inner());
        let (mut b, _) = self
            .ready
            .wait_timeout_while(b, timeout, |b| b.events.is_empty() && !b.closed)
            .unwrap_or_else(|p| p.into_inner());
        b.events.pop_front()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn is_closed(&self) -> bool {
        self.buf.lock().unwrap_or_else(|p| p.into_inner()).closed
    }
}

/// Fan-out of job events to any number of listeners. Publishing never blocks
/// on a listener.
#[derive(Clone, Default)]
pub struct EventBus {
    subs: Arc<Mutex<Vec<Arc<Subscription>>>>,
}

impl fmt::Debug for EventBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventBus").field("listeners", &self.subs.lock().map(|s| s.len()).unwrap_or(0)).finish()
    }
}

pub const DEFAULT_LISTENER_CAPACITY: usize = 4096;

impl EventBus {
    pub fn new() -> Self {
        EventBus::default()
    }

    pub fn register_listener(&self, capacity: usize) -> Arc<Subscription> {
        let sub = Arc::new(Subscription {
            capacity: capacity.max(1),
            buf: Mutex::new(Buffer { events: VecDeque::new(), closed: false }),
            ready: Condvar::new(),
            dropped: AtomicU64::new(0),
        });
        self.subs.lock().unwrap_or_else(|p| p.into_inner()).push(sub.clone());
        sub
    }

    /// Delivers an event that has already been persisted.
    pub fn publish(&self, ev: JobEvent) {
        info!(target: "broker::events", "{ev}");
        for s in self.subs.lock().unwrap_or_else(|p| p.into_inner()).iter() {
            s.push(&ev);
        }
    }

    /// Wakes waiting listeners; they drain what is left and then see `None`.
    pub fn close(&self) {
        for s in self.subs.lock().unwrap_or_else(|p| p.into_inner()).iter() {
            s.buf.lock().unwrap_or_else(|p| p.into_inner()).closed = true;
            s.ready.notify_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(i: u64) -> JobEvent {
        JobEvent { job_id: format!("j{i}"), old_state: JobState::Ready, new_state: JobState::Scheduled, at_ms: i, detail: None }
    }

    #[test]
    fn both_listeners_see_the_same_sequence() {
        let bus = EventBus::new();
        let a = bus.register_listener(10);
        let b = bus.register_listener(10);
        for i in 0..5 {
            bus.publish(ev(i));
        }
        let got = a.drain();
        assert_eq!(got, b.drain());
        assert_eq!(got.iter().map(|e| e.at_ms).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn saturated_listener_drops_oldest() {
        let bus = EventBus::new();
        let s = bus.register_listener(3);
        for i in 0..10 {
            bus.publish(ev(i));
        }
        assert_eq!(s.dropped(), 7);
        assert_eq!(s.drain().iter().map(|e| e.at_ms).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn log_line_round_trip() {
        let e = JobEvent {
            job_id: "j000001".into(),
            old_state: JobState::Active,
            new_state: JobState::StageOut,
            at_ms: 12,
            detail: Some("exit 0".into()),
        };
        let line = e.to_string();
        assert_eq!(line, "event job=j000001 from=ACTIVE to=STAGE_OUT t=12 detail=exit 0");
        assert_eq!(JobEvent::parse_line(&format!("INFO {line}")), Some(e));
    }

    #[test]
    fn closed_bus_wakes_receivers() {
        let bus = EventBus::new();
        let s = bus.register_listener(4);
        bus.publish(ev(1));
        bus.close();
        assert!(s.recv_timeout(Duration::from_secs(5)).is_some());
        assert!(s.recv_timeout(Duration::from_secs(5)).is_none());
    }
}
