//! Discrete-event clock: a queue ordered by (time, insertion sequence).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

struct Entry<T> {
    time: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct SimClock<T> {
    now: f64,
    seq: u64,
    queue: BinaryHeap<Entry<T>>,
}

impl<T> Default for SimClock<T> {
    fn default() -> Self {
        Self {
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<T> SimClock<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules `item` at `time`; times in the past are clamped to now.
    pub fn schedule(&mut self, time: f64, item: T) {
        let time = if time < self.now { self.now } else { time };
        self.queue.push(Entry {
            time,
            seq: self.seq,
            item,
        });
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: f64, item: T) {
        self.schedule(self.now + delay, item);
    }

    pub fn pop(&mut self) -> Option<(f64, T)> {
        let e = self.queue.pop()?;
        self.now = e.time;
        Some((e.time, e.item))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_sequence() {
        let mut c = SimClock::new();
        c.schedule(2.0, "late");
        c.schedule(1.0, "a");
        c.schedule(1.0, "b");
        assert_eq!(c.pop(), Some((1.0, "a")));
        assert_eq!(c.pop(), Some((1.0, "b")));
        c.schedule(0.5, "clamped");
        assert_eq!(c.pop(), Some((1.0, "clamped")));
        assert_eq!(c.pop(), Some((2.0, "late")));
        assert_eq!(c.pop(), None);
        assert_eq!(c.now(), 2.0);
    }
}
