//! Exact Hamming search over packed codes.

use crate::error::{Error, Result};
use crate::hash::{BitCodeMatrix, CodeDatabase};

/// Popcount of the XOR over the `k` valid bits.
pub fn hamming(a: &[u64], b: &[u64], k: usize) -> Result<u32> {
    let words = k.div_ceil(64);
    if a.len() != words || b.len() != words {
        return Err(Error::dim(format!(
            "codes of {} and {} words do not hold {k} bits",
            a.len(),
            b.len()
        )));
    }
    let rem = k % 64;
    let mut d = 0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let mut diff = x ^ y;
        if i + 1 == words && rem != 0 {
            diff &= (1u64 << rem) - 1;
        }
        d += diff.count_ones();
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: u32,
}

/// Immutable index over database codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HammingIndex {
    db: CodeDatabase,
}

impl HammingIndex {
    pub fn build(codes: BitCodeMatrix, labels: Vec<usize>) -> Result<Self> {
        Ok(Self {
            db: CodeDatabase::new(codes, labels)?,
        })
    }

    pub fn from_database(db: CodeDatabase) -> Self {
        Self { db }
    }

    pub fn len(&self) -> usize {
        self.db.codes.n_codes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code_length(&self) -> usize {
        self.db.codes.code_length()
    }

    pub fn codes(&self) -> &BitCodeMatrix {
        &self.db.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.db.labels
    }

    pub fn database(&self) -> &CodeDatabase {
        &self.db
    }

    /// Distance from `code` to every database entry, in id order.
    pub fn distances(&self, code: &[u64]) -> Result<Vec<u32>> {
        let k = self.code_length();
        (0..self.len()).map(|i| hamming(code, self.db.codes.code(i), k)).collect()
    }

    /// The `top` nearest entries by Hamming distance, ties by ascending id.
    ///
    /// Counting sort over the `k+1` possible distances, so the output order
    /// is fully determined.
    pub fn query_topk(&self, code: &[u64], top: usize) -> Result<Vec<Neighbor>> {
        if top == 0 {
            return Err(Error::config("K", "must be at least 1"));
        }
        let k = self.code_length();
        let dists = self.distances(code)?;
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
        for (id, &d) in dists.iter().enumerate() {
            buckets[d as usize].push(id);
        }
        Ok(buckets
            .into_iter()
            .enumerate()
            .flat_map(|(d, ids)| ids.into_iter().map(move |id| Neighbor { id, distance: d as u32 }))
            .take(top)
            .collect())
    }
}
