//! Relative distances and the shared relative-position embedding table.

use std::collections::HashMap;
use std::ops::Deref;
use std::sync::{Arc, Mutex};

use crate::tensor::{IndexMatrix, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RelPosError {
    #[error("maximum relative distance k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("relative-position table must have {expected} rows (2k), got {found}")]
    TableRows { expected: usize, found: usize },
}

/// Bucketed relative distance from token `i` to token `j`, in `[0, 2k)`.
///
/// Offsets at or beyond `±k` saturate into the end buckets.
pub fn delta(i: usize, j: usize, k: usize) -> Result<usize, RelPosError> {
    if k == 0 {
        return Err(RelPosError::InvalidK(k));
    }
    Ok(delta_unchecked(i, j, k))
}

#[inline]
pub(crate) fn delta_unchecked(i: usize, j: usize, k: usize) -> usize {
    let diff = i as i64 - j as i64;
    let k = k as i64;
    if diff <= -k {
        0
    } else if diff >= k {
        (2 * k - 1) as usize
    } else {
        (diff + k) as usize
    }
}

/// `N × N` matrix with `values[i][j] = delta(i, j, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaMatrix {
    k: usize,
    index: IndexMatrix,
}

impl DeltaMatrix {
    pub fn new(n: usize, k: usize) -> Result<Self, RelPosError> {
        if k == 0 {
            return Err(RelPosError::InvalidK(k));
        }
        if n == 0 {
            return Err(RelPosError::EmptySequence);
        }
        Ok(Self {
            k,
            index: IndexMatrix::from_fn(n, n, |i, j| delta_unchecked(i, j, k)),
        })
    }

    pub fn len(&self) -> usize {
        self.index.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.index.rows() == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn index(&self) -> &IndexMatrix {
        &self.index
    }
}

impl Deref for DeltaMatrix {
    type Target = IndexMatrix;

    fn deref(&self) -> &IndexMatrix {
        &self.index
    }
}

pub fn build_delta_matrix(n: usize, k: usize) -> Result<DeltaMatrix, RelPosError> {
    DeltaMatrix::new(n, k)
}

/// Memo of delta matrices keyed by `(N, k)`. Safe to share across threads.
#[derive(Debug, Default)]
pub struct DeltaCache {
    inner: Mutex<HashMap<(usize, usize), Arc<IndexMatrix>>>,
}

impl DeltaCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The index matrix for `(n, k)`, built on first use.
    pub fn get(&self, n: usize, k: usize) -> Result<Arc<IndexMatrix>, RelPosError> {
        let mut map = self.inner.lock().expect("delta cache poisoned");
        if let Some(m) = map.get(&(n, k)) {
            return Ok(Arc::clone(m));
        }
        let dm = Arc::new(DeltaMatrix::new(n, k)?.index);
        map.insert((n, k), Arc::clone(&dm));
        Ok(dm)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("delta cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared relative-position embeddings `P ∈ R^{2k×d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTable {
    k: usize,
    table: Tensor,
}

impl RelPosTable {
    pub fn new(k: usize, table: Tensor) -> Result<Self, RelPosError> {
        if k == 0 {
            return Err(RelPosError::InvalidK(k));
        }
        let rows = table.shape().first().copied().unwrap_or(0);
        if table.rank() != 2 || rows != 2 * k {
            return Err(RelPosError::TableRows {
                expected: 2 * k,
                found: rows,
            });
        }
        Ok(Self { k, table })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.table.last_dim()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Tokens reachable through `layers` stacked layers when each layer sees at
/// most `2(k-1)` neighbours.
pub fn max_reach(k: usize, layers: usize) -> usize {
    2 * k.saturating_sub(1) * layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_examples() {
        assert_eq!(delta(5, 5, 4).unwrap(), 4);
        assert_eq!(delta(0, 9, 4).unwrap(), 0);
        assert_eq!(delta(9, 0, 4).unwrap(), 7);
        assert_eq!(delta(100, 97, 512).unwrap(), 515);
        assert_eq!(delta(1, 1, 0), Err(RelPosError::InvalidK(0)));
    }

    #[test]
    fn delta_matrix_examples() {
        assert_eq!(DeltaMatrix::new(1, 7).unwrap().data(), &[7]);
        let m = DeltaMatrix::new(3, 2).unwrap();
        assert_eq!(m.data(), &[2, 1, 0, 3, 2, 1, 3, 3, 2]);

        let k = 3;
        let n = 2 * k + 2;
        let m = DeltaMatrix::new(n, k).unwrap();
        let first = m.row(0);
        assert!(first[n - 3..].iter().all(|&v| v == 0));
        let last = m.row(n - 1);
        assert!(last[..3].iter().all(|&v| v == 2 * k - 1));
        for i in 0..n {
            assert_eq!(m.get(i, i), k);
        }
        assert_eq!(DeltaMatrix::new(0, 2), Err(RelPosError::EmptySequence));
    }

    #[test]
    fn cache_reuses_matrices() {
        let c = DeltaCache::new();
        let a = c.get(5, 2).unwrap();
        let b = c.get(5, 2).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        c.get(6, 2).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn reach_examples() {
        assert_eq!(max_reach(512, 24), 24_528);
        assert_eq!(max_reach(1, 10), 0);
        assert_eq!(max_reach(8, 2), 28);
    }

    #[test]
    fn table_row_count_is_checked() {
        assert!(RelPosTable::new(2, Tensor::zeros(&[4, 3])).is_ok());
        assert_eq!(
            RelPosTable::new(2, Tensor::zeros(&[5, 3])),
            Err(RelPosError::TableRows {
                expected: 4,
                found: 5
            })
        );
    }
}
