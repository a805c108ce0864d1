//! Bounded lock-free single-producer/single-consumer queue of slot indices.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

pub struct SpscRing {
    buf: Box<[AtomicU32]>,
    mask: usize,
    head: AtomicUsize,
    tail: AtomicUsize,
}

impl SpscRing {
    /// Capacity is rounded up to a power of two.
    pub fn with_capacity(cap: usize) -> Self {
        let cap = cap.max(1).next_power_of_two();
        Self {
            buf: (0..cap).map(|_| AtomicU32::new(0)).collect(),
            mask: cap - 1,
            head: AtomicUsize::new(0),
            tail: AtomicUsize::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.mask + 1
    }

    /// Producer side. Returns the value back if the queue is full.
    pub fn push(&self, v: u32) -> Result<(), u32> {
        let tail = self.tail.load(Ordering::Relaxed);
        let head = self.head.load(Ordering::Acquire);
        if tail.wrapping_sub(head) == self.capacity() {
            return Err(v);
        }
        self.buf[tail & self.mask].store(v, Ordering::Relaxed);
        self.tail.store(tail.wrapping_add(1), Ordering::Release);
        Ok(())
    }

    /// Consumer side.
    pub fn pop(&self) -> Option<u32> {
        let head = self.head.load(Ordering::Relaxed);
        let tail = self.tail.load(Ordering::Acquire);
        if head == tail {
            return None;
        }
        let v = self.buf[head & self.mask].load(Ordering::Relaxed);
        self.head.store(head.wrapping_add(1), Ordering::Release);
        Some(v)
    }

    /// Approximate when called concurrently.
    pub fn len(&self) -> usize {
        self.tail
            .load(Ordering::Acquire)
            .wrapping_sub(self.head.load(Ordering::Acquire))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn fifo_and_full() {
        let q = SpscRing::with_capacity(3);
        assert_eq!(q.capacity(), 4);
        for i in 0..4 {
            q.push(i).unwrap();
        }
        assert_eq!(q.push(9), Err(9));
        assert_eq!((0..4).map(|_| q.pop().unwrap()).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(q.pop().is_none());
    }

    #[test]
    fn two_threads_preserve_order() {
        let q = Arc::new(SpscRing::with_capacity(64));
        let n = 200_000u32;
        let p = {
            let q = q.clone();
            std::thread::spawn(move || {
                for i in 0..n {
                    while q.push(i).is_err() {
                        std::thread::yield_now();
                    }
                }
            })
        };
        let mut expect = 0;
        while expect < n {
            match q.pop() {
                Some(v) => {
                    assert_eq!(v, expect);
                    expect += 1;
                }
                None => std::thread::yield_now(),
            }
        }
        p.join().unwrap();
    }
}
