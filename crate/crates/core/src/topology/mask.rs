use bitvec::prelude::*;

use crate::tensor::Scalar;

/// Binary inclusion map over one weight matrix.
///
/// Also remembers every position that has ever been active, which gives the
/// exploration rate of a dynamic topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    layer: usize,
    rows: usize,
    cols: usize,
    bits: BitVec<u64, Lsb0>,
    ever: BitVec<u64, Lsb0>,
    active: usize,
}

impl LayerMask {
    pub fn full(layer: usize, rows: usize, cols: usize) -> Self {
        let bits = bitvec![u64, Lsb0; 1; rows * cols];
        LayerMask { layer, rows, cols, ever: bits.clone(), bits, active: rows * cols }
    }

    pub fn empty(layer: usize, rows: usize, cols: usize) -> Self {
        let bits = bitvec![u64, Lsb0; 0; rows * cols];
        LayerMask { layer, rows, cols, ever: bits.clone(), bits, active: 0 }
    }

    pub fn from_active(layer: usize, rows: usize, cols: usize, active: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::empty(layer, rows, cols);
        for i in active {
            mask.set(i, true);
        }
        mask
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.active as f64 / self.len() as f64
    }

    #[inline]
    pub fn is_active(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn set(&mut self, index: usize, on: bool) {
        let was = self.bits.replace(index, on);
        match (was, on) {
            (false, true) => {
                self.active += 1;
                self.ever.set(index, true);
            }
            (true, false) => self.active -= 1,
            _ => {}
        }
    }

    pub fn iter_active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn iter_inactive(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_zeros()
    }

    /// Zeroes every inactive entry of `values`.
    pub fn apply<T: Scalar>(&self, values: &mut [T]) {
        debug_assert_eq!(values.len(), self.len());
        for i in self.bits.iter_zeros() {
            values[i] = T::zero();
        }
    }

    /// Fraction of positions that have been active at some point.
    pub fn explored_fraction(&self) -> f64 {
        self.ever.count_ones() as f64 / self.len() as f64
    }

    /// Raw words for serialization: active bits then ever-active bits.
    pub fn to_words(&self) -> (Vec<u64>, Vec<u64>) {
        (self.bits.as_raw_slice().to_vec(), self.ever.as_raw_slice().to_vec())
    }

    pub fn from_words(layer: usize, rows: usize, cols: usize, bits: Vec<u64>, ever: Vec<u64>) -> Option<Self> {
        let n = rows * cols;
        let words = n.div_ceil(64);
        if bits.len() != words || ever.len() != words {
            return None;
        }
        let mut bits = BitVec::<u64, Lsb0>::from_vec(bits);
        let mut ever = BitVec::<u64, Lsb0>::from_vec(ever);
        bits.truncate(n);
        ever.truncate(n);
        let active = bits.count_ones();
        Some(LayerMask { layer, rows, cols, bits, ever, active })
    }
}
