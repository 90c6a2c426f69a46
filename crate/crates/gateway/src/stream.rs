//! Live record push with a bounded per-subscriber buffer.
//!
//! A [`Subscription`] observes the store and queues matching inserts. When
//! the queue is full the oldest entry is dropped; the next delivered record
//! is then preceded by a gap marker carrying the number of records lost.

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use tokio::sync::Notify;

use rtapc::store::{ObserverId, StoreObserver};
use rtapc::{Record, SharedData, StatusCode, TableKey, Timestamp};

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage {
    Record { table: String, index: usize, ts: Timestamp, status: StatusCode, value: f64 },
    Gap { dropped: u64 },
    Heartbeat { ts: Timestamp },
}

impl StreamMessage {
    pub fn record(key: &TableKey, r: &Record<f64>) -> Self {
        StreamMessage::Record {
            table: key.table().to_owned(),
            index: key.index(),
            ts: r.ts,
            status: r.status.clone(),
            value: r.value,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stream messages serialize")
    }
}

#[derive(Default)]
struct Queue {
    items: VecDeque<(TableKey, Record<f64>)>,
    dropped: u64,
}

struct Inbox {
    /// Empty means every key.
    filter: BTreeSet<TableKey>,
    capacity: usize,
    queue: Mutex<Queue>,
    notify: Notify,
}

impl StoreObserver for Inbox {
    fn on_insert(&self, key: &TableKey, record: &Record<f64>) {
        if !self.filter.is_empty() && !self.filter.contains(key) {
            return;
        }
        let mut q = self.queue.lock().unwrap();
        if q.items.len() == self.capacity {
            q.items.pop_front();
            q.dropped += 1;
        }
        q.items.push_back((key.clone(), record.clone()));
        drop(q);
        self.notify.notify_one();
    }
}

/// Receives every matching insert made after it was created.
pub struct Subscription {
    store: Arc<dyn SharedData>,
    inbox: Arc<Inbox>,
    id: ObserverId,
}

impl Subscription {
    /// Subscribes to `keys`, or to everything when `keys` is empty.
    pub fn new(store: Arc<dyn SharedData>, keys: impl IntoIterator<Item = TableKey>, capacity: usize) -> Self {
        let inbox = Arc::new(Inbox {
            filter: keys.into_iter().collect(),
            capacity: capacity.max(1),
            queue: Mutex::default(),
            notify: Notify::new(),
        });
        let id = store.observe(inbox.clone());
        Subscription { store, inbox, id }
    }

    /// Queued messages, oldest first, without waiting. A gap marker comes
    /// first when records were dropped since the last drain.
    pub fn drain(&self) -> Vec<StreamMessage> {
        let mut q = self.inbox.queue.lock().unwrap();
        let mut out = Vec::with_capacity(q.items.len() + 1);
        if q.dropped > 0 {
            out.push(StreamMessage::Gap { dropped: q.dropped });
            q.dropped = 0;
        }
        out.extend(q.items.drain(..).map(|(k, r)| StreamMessage::record(&k, &r)));
        out
    }

    /// Waits until something is queued, then drains.
    pub async fn next_batch(&self) -> Vec<StreamMessage> {
        loop {
            let notified = self.inbox.notify.notified();
            let batch = self.drain();
            if !batch.is_empty() {
                return batch;
            }
            notified.await;
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.store.unobserve(self.id);
    }
}
