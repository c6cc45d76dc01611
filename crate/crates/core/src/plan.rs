//! Chunk boundaries over the sequence dimension.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered boundaries `0 = b₀ < b₁ < … < b_D = n` splitting `[0, n)` into
/// non-empty chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    bounds: Vec<usize>,
}

impl ChunkPlan {
    /// `chunks` near-equal chunks over `n` positions. Sizes differ by at
    /// most one; the first `n mod chunks` chunks take the extra position.
    /// A request for more chunks than positions yields one chunk per
    /// position.
    pub fn balanced(n: usize, chunks: usize) -> Result<Self> {
        if chunks == 0 {
            return Err(Error::config("plan", "chunk count must be at least 1"));
        }
        let d = chunks.min(n);
        let mut bounds = Vec::with_capacity(d + 1);
        bounds.push(0);
        if d > 0 {
            let (base, extra) = (n / d, n % d);
            let mut at = 0;
            for i in 0..d {
                at += base + usize::from(i < extra);
                bounds.push(at);
            }
        }
        Ok(ChunkPlan { bounds })
    }

    pub fn single(n: usize) -> Self {
        Self::balanced(n, 1).expect("one chunk is always valid")
    }

    pub fn from_bounds(bounds: Vec<usize>, n: usize) -> Result<Self> {
        if bounds.first() != Some(&0) || bounds.last() != Some(&n) {
            return Err(Error::config("plan.boundaries", format!("must run from 0 to {n}")));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) && n > 0 {
            return Err(Error::config("plan.boundaries", "chunks must be non-empty and increasing"));
        }
        Ok(ChunkPlan { bounds })
    }

    pub fn chunks(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn len(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn range(&self, i: usize) -> Result<Range<usize>> {
        if i >= self.chunks() {
            return Err(Error::ChunkOutOfRange {
                index: i,
                chunks: self.chunks(),
            });
        }
        Ok(self.bounds[i]..self.bounds[i + 1])
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }

    pub fn max_chunk_len(&self) -> usize {
        self.ranges().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Chunk counts for the transformer layers and for the lm-head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub d_layer: usize,
    pub d_head: usize,
}

impl PartitionPlan {
    pub fn new(d_layer: usize, d_head: usize) -> Result<Self> {
        let plan = PartitionPlan { d_layer, d_head };
        plan.validate()?;
        Ok(plan)
    }

    pub fn unpartitioned() -> Self {
        PartitionPlan {
            d_layer: 1,
            d_head: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_layer == 0 {
            return Err(Error::config("plan.d_layer", "must be at least 1"));
        }
        if self.d_head == 0 {
            return Err(Error::config("plan.d_head", "must be at least 1"));
        }
        Ok(())
    }

    pub fn layer_plan(&self, seq_len: usize) -> Result<ChunkPlan> {
        ChunkPlan::balanced(seq_len, self.d_layer)
    }

    pub fn head_plan(&self, rows: usize) -> Result<ChunkPlan> {
        ChunkPlan::balanced(rows, self.d_head)
    }
}
