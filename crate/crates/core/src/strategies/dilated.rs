//! Dilated window attention as two alternating FIFO queues.

use crate::error::{domain, Result};
use crate::memory::{readout, BoundedMemory, TransitionOp};
use crate::numerics::Vector;

/// Parity of the one-based step index `t = pos + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueParity {
    Odd,
    Even,
}

impl QueueParity {
    pub fn of_position(pos: usize) -> Self {
        if pos.is_multiple_of(2) {
            QueueParity::Odd
        } else {
            QueueParity::Even
        }
    }
}

/// Odd and even step queues; the query at step `t` reads the queue that
/// step `t` was written to, so it sees `t, t-2, …, t-2n+2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedQueues {
    pub odd: BoundedMemory,
    pub even: BoundedMemory,
}

impl DilatedQueues {
    pub fn new(slots: usize, dim: usize) -> Self {
        Self { odd: BoundedMemory::new(slots, dim), even: BoundedMemory::new(slots, dim) }
    }

    pub fn queue(&self, parity: QueueParity) -> &BoundedMemory {
        match parity {
            QueueParity::Odd => &self.odd,
            QueueParity::Even => &self.even,
        }
    }

    /// Pushes `(k, v)` at zero-based position `pos` into the matching queue
    /// and returns which queue is active for that position's query.
    pub fn push(&mut self, pos: usize, k: &[f64], v: &[f64]) -> Result<QueueParity> {
        let parity = QueueParity::of_position(pos);
        let queue = match parity {
            QueueParity::Odd => &mut self.odd,
            QueueParity::Even => &mut self.even,
        };
        let n = queue.slots();
        if n == 0 {
            return domain("dilated queues need at least one slot");
        }
        let mut phi = vec![0.0; n];
        phi[n - 1] = 1.0;
        queue.step(&phi, k, v, TransitionOp::UpperShift)?;
        Ok(parity)
    }

    /// Push then read with `q`.
    pub fn step_and_read(&mut self, pos: usize, q: &[f64], k: &[f64], v: &[f64], temperature: f64) -> Result<Vector> {
        let parity = self.push(pos, k, v)?;
        readout(q, self.queue(parity), temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::full_attention;
    use crate::numerics::{max_abs_diff, Matrix, SeededRng};

    #[test]
    fn queues_hold_alternate_keys() {
        let mut q = DilatedQueues::new(2, 1);
        let keys: Vec<[f64; 1]> = (1..=6).map(|t| [t as f64]).collect();
        for (pos, k) in keys.iter().enumerate() {
            q.push(pos, k, k).unwrap();
            if pos == 4 {
                assert_eq!(q.odd.ktilde.as_slice(), &[3.0, 5.0]);
            }
        }
        assert_eq!(q.even.ktilde.as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn single_parity_leaves_other_queue_empty() {
        let mut q = DilatedQueues::new(3, 2);
        for pos in (0..10).step_by(2) {
            q.push(pos, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        }
        assert!(q.even.ktilde.as_slice().iter().all(|&x| x == 0.0));
        assert!(q.even.vtilde.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_direct_attention_over_parity_set() {
        let n = 3;
        let len = 14;
        let mut rng = SeededRng::new(77);
        let k = Matrix::random_normal(len, 4, 1.0, &mut rng);
        let v = Matrix::random_normal(len, 4, 1.0, &mut rng);
        let qs = Matrix::random_normal(len, 4, 1.0, &mut rng);
        let mut queues = DilatedQueues::new(n, 4);
        for pos in 0..len {
            let out = queues.step_and_read(pos, qs.row(pos), k.row(pos), v.row(pos), 1.0).unwrap();
            // Window {pos, pos-2, …, pos-2n+2}; positions before the start are zero rows.
            let mut kw = Matrix::zeros(n, 4);
            let mut vw = Matrix::zeros(n, 4);
            for slot in 0..n {
                let back = 2 * (n - 1 - slot);
                if pos >= back {
                    kw.row_mut(slot).copy_from_slice(k.row(pos - back));
                    vw.row_mut(slot).copy_from_slice(v.row(pos - back));
                }
            }
            let direct = full_attention(qs.row(pos), &kw, &vw, 1.0).unwrap();
            assert!(max_abs_diff(&out, &direct) <= 1e-10);
        }
    }
}
