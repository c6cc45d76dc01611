//! Counting model of collective communication during one streamed backward
//! step on a data-parallel cluster.
//!
//! Only the backward pass is modeled. Each layer's gradient must be reduced
//! across workers; under parameter sharding each layer's weights must also
//! be gathered before use. The naive schedule issues these per chunk, the
//! cached schedule once per layer by keeping the gathered layer resident
//! and accumulating chunk gradients locally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharding {
    /// Every worker holds all parameters.
    Replicated,
    /// Parameters are split across workers and gathered on demand.
    ParamSharded,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub workers: u64,
    pub layers: u64,
    #[serde(rename = "D")]
    pub chunks: u64,
    pub strategy: Strategy,
    pub sharding: Sharding,
    pub bytes_per_layer_params: u64,
    pub bytes_per_layer_grads: u64,
    /// Micro-batches accumulated per optimizer step.
    #[serde(default = "one")]
    pub accumulation_steps: u64,
    /// Reduce gradients once after all micro-batches instead of after each.
    #[serde(default)]
    pub reduce_at_end: bool,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("workers", self.workers),
            ("layers", self.layers),
            ("D", self.chunks),
            ("accumulation_steps", self.accumulation_steps),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerComm {
    pub layer: u64,
    pub allgather_events: u64,
    pub reduce_events: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommReport {
    pub allgather_events: u64,
    pub reduce_events: u64,
    pub allgather_bytes: u64,
    pub reduce_bytes: u64,
    /// Memory held beyond a worker's shard to avoid regathering.
    pub extra_resident_bytes: u64,
    pub per_layer: Vec<LayerComm>,
}

fn tally(spec: &ClusterSpec, per_use: u64, extra_resident_bytes: u64) -> CommReport {
    let k = spec.accumulation_steps;
    let reduce = if spec.reduce_at_end { 1 } else { per_use * k };
    let gather = match spec.sharding {
        Sharding::Replicated => 0,
        Sharding::ParamSharded => per_use * k,
    };
    let per_layer: Vec<LayerComm> = (0..spec.layers)
        .map(|layer| LayerComm {
            layer,
            allgather_events: gather,
            reduce_events: reduce,
        })
        .collect();
    let allgather_events = gather * spec.layers;
    let reduce_events = reduce * spec.layers;
    CommReport {
        allgather_events,
        reduce_events,
        allgather_bytes: allgather_events * spec.bytes_per_layer_params,
        reduce_bytes: reduce_events * spec.bytes_per_layer_grads,
        extra_resident_bytes,
        per_layer,
    }
}

/// Communication of one streamed backward step under `spec`.
pub fn simulate_step(spec: &ClusterSpec) -> CommReport {
    match spec.strategy {
        Strategy::Naive => tally(spec, spec.chunks, 0),
        Strategy::Cached => {
            let extra = match spec.sharding {
                Sharding::ParamSharded => spec.bytes_per_layer_params,
                Sharding::Replicated => 0,
            };
            tally(spec, 1, extra)
        }
    }
}

/// Communication of an unchunked backward step on the same cluster.
pub fn simulate_standard_step(spec: &ClusterSpec) -> CommReport {
    tally(spec, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(layers: u64, d: u64, strategy: Strategy, sharding: Sharding) -> ClusterSpec {
        ClusterSpec {
            workers: 4,
            layers,
            chunks: d,
            strategy,
            sharding,
            bytes_per_layer_params: 1000,
            bytes_per_layer_grads: 800,
            accumulation_steps: 1,
            reduce_at_end: false,
        }
    }

    #[test]
    fn one_chunk_makes_schedules_agree() {
        for sh in [Sharding::Replicated, Sharding::ParamSharded] {
            let n = simulate_step(&spec(3, 1, Strategy::Naive, sh));
            let c = simulate_step(&spec(3, 1, Strategy::Cached, sh));
            assert_eq!(n.allgather_events, c.allgather_events);
            assert_eq!(n.reduce_events, c.reduce_events);
            assert_eq!(n.allgather_bytes, c.allgather_bytes);
            assert_eq!(n.reduce_bytes, c.reduce_bytes);
        }
    }

    #[test]
    fn sharded_gather_counts() {
        let n = simulate_step(&spec(4, 8, Strategy::Naive, Sharding::ParamSharded));
        let c = simulate_step(&spec(4, 8, Strategy::Cached, Sharding::ParamSharded));
        assert_eq!(n.allgather_events, 32);
        assert_eq!(c.allgather_events, 4);
        assert_eq!(n.allgather_events - c.allgather_events, 4 * 7);
        assert_eq!(c.extra_resident_bytes, 1000);
        assert_eq!(n.allgather_bytes, 32 * 1000);
    }

    #[test]
    fn cached_reduction_matches_standard() {
        for d in [1, 5, 64] {
            let s = spec(3, d, Strategy::Cached, Sharding::Replicated);
            assert_eq!(simulate_step(&s).reduce_events, 3);
            assert_eq!(simulate_standard_step(&s).reduce_events, 3);
            assert_eq!(simulate_step(&s).allgather_events, 0);
            let naive = spec(3, d, Strategy::Naive, Sharding::Replicated);
            assert_eq!(simulate_step(&naive).reduce_events, 3 * d);
        }
    }

    #[test]
    fn accumulation_multiplier() {
        let mut s = spec(2, 4, Strategy::Cached, Sharding::ParamSharded);
        s.accumulation_steps = 3;
        let r = simulate_step(&s);
        assert_eq!(r.reduce_events, 6);
        assert_eq!(r.allgather_events, 6);
        s.reduce_at_end = true;
        let r = simulate_step(&s);
        assert_eq!(r.reduce_events, 2);
        assert_eq!(r.per_layer.len(), 2);
    }

    #[test]
    fn validation() {
        let mut s = spec(2, 4, Strategy::Cached, Sharding::Replicated);
        s.workers = 0;
        assert!(s.validate().is_err());
    }
}
