//! Discrete-event core: a monotone clock and a cancelable priority queue.
//!
//! Events are ordered by `(time, seq)` where `seq` is the scheduling order,
//! so simultaneous events are delivered first-scheduled-first and every run
//! of the same schedule replays identically. Cancellation is lazy: entries
//! stay in the heap and are skipped on pop.

use crate::flow::TransferId;
use crate::model::{CapacityClass, PeerId};

/// Handle returned by [`EventQueue::schedule`], usable to cancel the event
/// before it fires.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct EventId(u64);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    /// An active block transfer drained its remaining bytes.
    BlockComplete { transfer: TransferId },
    /// Periodic upload-slot re-evaluation for one peer.
    ReevalTick { peer: PeerId },
    /// The every-k-th tick on which altruistic/optimistic slots rotate.
    OptimisticTick { peer: PeerId },
    /// A session dwell ran out; the peer acts (or returns to play).
    InteractiveAction { peer: PeerId },
    /// Playback reaches the end of the current piece.
    PlaybackBoundary { peer: PeerId },
    /// A fresh leecher of the given class joins (churn replacement).
    Arrival { class: CapacityClass },
    /// A peer leaves the swarm.
    Departure { peer: PeerId },
}

#[derive(Clone, Copy, Debug)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub id: EventId,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending-event store. The clock only moves forward: scheduling behind it is
/// a logic error and panics rather than silently reordering history.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: std::collections::BinaryHeap<Entry>,
    cancelled: Vec<bool>,
    clock: f64,
    live: usize,
}

impl EventQueue {
    pub fn new() -> EventQueue {
        EventQueue::default()
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    /// Number of scheduled, not-yet-delivered, not-cancelled events.
    pub fn pending(&self) -> usize {
        self.live
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> EventId {
        assert!(
            time.is_finite() && time >= self.clock - 1e-9,
            "scheduled {kind:?} at {time} behind the clock {}",
            self.clock
        );
        // Tiny negative offsets come from float round-off in rate math.
        let time = time.max(self.clock);
        let seq = self.cancelled.len() as u64;
        self.cancelled.push(false);
        self.heap.push(Entry { time, seq, kind });
        self.live += 1;
        EventId(seq)
    }

    /// Cancels a pending event. Cancelling one that already fired or was
    /// already cancelled is a no-op.
    pub fn cancel(&mut self, id: EventId) {
        let slot = &mut self.cancelled[id.0 as usize];
        if !*slot {
            *slot = true;
            self.live = self.live.saturating_sub(1);
        }
    }

    /// Time of the next live event without delivering it.
    pub fn peek_time(&mut self) -> Option<f64> {
        self.skim();
        self.heap.peek().map(|e| e.time)
    }

    /// Delivers the next live event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        self.skim();
        let entry = self.heap.pop()?;
        debug_assert!(entry.time >= self.clock);
        self.clock = entry.time;
        self.cancelled[entry.seq as usize] = true;
        self.live -= 1;
        Some(Event {
            time: entry.time,
            seq: entry.seq,
            id: EventId(entry.seq),
            kind: entry.kind,
        })
    }

    fn skim(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.cancelled[top.seq as usize] {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Moves the clock to `time` with no event. Used to close out a run at
    /// its configured duration.
    pub fn advance_to(&mut self, time: f64) {
        assert!(time >= self.clock, "clock may not move backwards");
        self.clock = time;
    }
}

/// World half of the event loop: owns all state except the queue itself, so
/// handlers can schedule and cancel freely while reacting to an event.
pub trait EventHandler {
    fn handle(&mut self, event: Event, queue: &mut EventQueue);
}

/// Drains the queue in timestamp order until the next event would land at or
/// beyond `until`, then parks the clock exactly at `until`.
pub fn run<H: EventHandler>(queue: &mut EventQueue, handler: &mut H, until: f64) {
    while let Some(t) = queue.peek_time() {
        if t >= until {
            break;
        }
        let event = queue.pop().expect("peeked event vanished");
        handler.handle(event, queue);
    }
    if queue.now() < until {
        queue.advance_to(until);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PeerId;
    use proptest::prelude::*;

    fn tick(peer: u32) -> EventKind {
        EventKind::ReevalTick { peer: PeerId(peer) }
    }

    #[test]
    fn events_pop_in_time_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, tick(0));
        q.schedule(1.0, tick(1));
        q.schedule(3.0, tick(2));
        let order: Vec<f64> = std::iter::from_fn(|| q.pop()).map(|e| e.time).collect();
        assert_eq!(order, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn simultaneous_events_keep_scheduling_order() {
        let mut q = EventQueue::new();
        let ids: Vec<_> = (0..10).map(|i| q.schedule(2.0, tick(i))).collect();
        let seen: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.id).collect();
        assert_eq!(seen, ids);
    }

    #[test]
    fn cancelled_events_are_never_delivered() {
        let mut q = EventQueue::new();
        let a = q.schedule(1.0, tick(0));
        q.schedule(2.0, tick(1));
        let c = q.schedule(3.0, tick(2));
        q.cancel(a);
        q.cancel(c);
        q.cancel(c); // double-cancel is harmless
        assert_eq!(q.pending(), 1);
        let only = q.pop().unwrap();
        assert_eq!(only.time, 2.0);
        assert!(q.pop().is_none());
    }

    #[test]
    fn popping_advances_the_clock_monotonically() {
        let mut q = EventQueue::new();
        q.schedule(4.0, tick(0));
        q.schedule(4.0, tick(1));
        q.schedule(9.0, tick(2));
        let mut last = 0.0;
        while let Some(e) = q.pop() {
            assert!(e.time >= last);
            assert_eq!(q.now(), e.time);
            last = e.time;
        }
    }

    #[test]
    #[should_panic(expected = "behind the clock")]
    fn scheduling_in_the_past_is_fatal() {
        let mut q = EventQueue::new();
        q.schedule(5.0, tick(0));
        q.pop();
        q.schedule(1.0, tick(1));
    }

    #[test]
    fn run_stops_at_the_configured_duration() {
        struct Counter(Vec<f64>);
        impl EventHandler for Counter {
            fn handle(&mut self, event: Event, queue: &mut EventQueue) {
                self.0.push(event.time);
                if event.time < 3.0 {
                    queue.schedule(event.time + 1.0, tick(9));
                }
            }
        }
        let mut q = EventQueue::new();
        q.schedule(0.5, tick(0));
        q.schedule(99.0, tick(1));
        let mut h = Counter(Vec::new());
        run(&mut q, &mut h, 10.0);
        assert_eq!(h.0, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(q.now(), 10.0, "clock parks at the duration");
        assert_eq!(q.pending(), 1, "the 99s event stays pending");
    }

    #[test]
    fn empty_queue_run_still_reaches_the_duration() {
        struct Nop;
        impl EventHandler for Nop {
            fn handle(&mut self, _: Event, _: &mut EventQueue) {}
        }
        let mut q = EventQueue::new();
        run(&mut q, &mut Nop, 7.5);
        assert_eq!(q.now(), 7.5);
    }

    proptest! {
        #[test]
        fn random_schedules_and_cancels_deliver_sorted_survivors(
            times in proptest::collection::vec(0.0f64..1000.0, 1..200),
            cancel_mask in proptest::collection::vec(any::<bool>(), 1..200),
        ) {
            let mut q = EventQueue::new();
            let ids: Vec<_> = times.iter().map(|t| q.schedule(*t, tick(0))).collect();
            let mut expect: Vec<(u64, f64)> = Vec::new();
            for (i, id) in ids.iter().enumerate() {
                if *cancel_mask.get(i).unwrap_or(&false) {
                    q.cancel(*id);
                } else {
                    expect.push((i as u64, times[i]));
                }
            }
            expect.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let got: Vec<(u64, f64)> =
                std::iter::from_fn(|| q.pop()).map(|e| (e.seq, e.time)).collect();
            prop_assert_eq!(got, expect);
        }
    }
}
