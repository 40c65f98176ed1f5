//! FIFO ring of unit-norm negative embeddings.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};
use crate::rng::SeededRng;

/// Label carried by columns that did not come from a labelled batch.
pub const UNLABELED: u32 = u32::MAX;

/// Rows pushed into a queue must have unit norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue<T> {
    capacity: usize,
    dim: usize,
    /// Slot-major storage: slot `s` occupies `slots[s*dim..(s+1)*dim]`.
    slots: Vec<T>,
    /// Next slot to overwrite, which is also the oldest entry.
    head: usize,
    labels: Option<Vec<u32>>,
}

impl<T: Scalar> NegativeQueue<T> {
    /// A queue of `capacity` independent random unit vectors of width `dim`.
    pub fn new(capacity: usize, dim: usize, rng: &SeededRng) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::param("queue", format!("capacity {capacity} and dim {dim} must be positive")));
        }
        let mut r = rng.rng();
        let mut slots = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            let v: Vec<f64> = loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                if v.iter().any(|x| *x != 0.0) {
                    break v;
                }
            };
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            slots.extend(v.iter().map(|x| T::of(x / norm)));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            slots,
            head: 0,
            labels: None,
        })
    }

    /// Starts tracking a class label per column (analysis only).
    pub fn with_labels(mut self) -> Self {
        self.labels = Some(vec![UNLABELED; self.capacity]);
        self
    }

    pub fn tracks_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Replaces the `N` oldest columns with the rows of `z`.
    pub fn enqueue_dequeue(&mut self, z: &Tensor<T>, labels: Option<&[u32]>) -> Result<()> {
        let (n, d) = z.dims2()?;
        if d != self.dim {
            return Err(Error::shape("enqueue", z.shape(), &[n, self.dim]));
        }
        if n > self.capacity {
            return Err(Error::Capacity {
                batch: n,
                capacity: self.capacity,
            });
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape("enqueue labels", &[n], &[l.len()]));
            }
        }
        for i in 0..n {
            let norm = z.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::param("enqueue", format!("row {i} has norm {norm}, expected 1")));
            }
        }
        for i in 0..n {
            let s = self.head;
            self.slots[s * self.dim..(s + 1) * self.dim].copy_from_slice(z.row(i));
            if let Some(store) = &mut self.labels {
                store[s] = labels.map_or(UNLABELED, |l| l[i]);
            }
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Slot indices from oldest to newest.
    fn order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.capacity).map(move |k| (self.head + k) % self.capacity)
    }

    /// D×Q snapshot, columns ordered oldest → newest.
    pub fn as_matrix(&self) -> Tensor<T> {
        let q = self.capacity;
        let mut out = vec![T::zero(); self.dim * q];
        for (col, slot) in self.order().enumerate() {
            for (r, &v) in self.slots[slot * self.dim..(slot + 1) * self.dim].iter().enumerate() {
                out[r * q + col] = v;
            }
        }
        Tensor::new(&[self.dim, q], out).expect("queue dims are positive")
    }

    /// Column `j` of [`as_matrix`](Self::as_matrix) as a vector.
    pub fn column(&self, j: usize) -> &[T] {
        let slot = (self.head + j) % self.capacity;
        &self.slots[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Labels aligned with the columns of [`as_matrix`](Self::as_matrix).
    pub fn labels(&self) -> Option<Vec<u32>> {
        self.labels.as_ref().map(|l| self.order().map(|s| l[s]).collect())
    }

    /// Raw ring state `(slots, head, labels)` for serialization.
    pub fn raw_parts(&self) -> (&[T], usize, Option<&[u32]>) {
        (&self.slots, self.head, self.labels.as_deref())
    }

    pub fn from_raw_parts(capacity: usize, dim: usize, slots: Vec<T>, head: usize, labels: Option<Vec<u32>>) -> Result<Self> {
        if capacity == 0 || dim == 0 || slots.len() != capacity * dim || head >= capacity {
            return Err(Error::shape("queue", &[capacity, dim, head], &[slots.len()]));
        }
        if labels.as_ref().is_some_and(|l| l.len() != capacity) {
            return Err(Error::shape("queue labels", &[capacity], &[labels.map_or(0, |l| l.len())]));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            slots,
            head,
            labels,
        })
    }

    /// Largest deviation of any column norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.slots
            .chunks(self.dim)
            .map(|c| (c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
