//! Deterministic counters for activation memory, FLOPs and weight reloads.
//!
//! A [`Meter`] is owned by one run and handed explicitly to every operation
//! that allocates or computes. Metered matrices report their own allocation
//! and release, so the peak figures are exact rather than sampled.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

use crate::error::{Error, Result};

/// What a metered buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Parameter,
    Gradient,
    Activation,
    /// Logits and logits gradients. Counted as activation memory.
    Logits,
    /// Externally supplied data (model inputs, demo inputs).
    Input,
    Scratch,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::Parameter,
        Tag::Gradient,
        Tag::Activation,
        Tag::Logits,
        Tag::Input,
        Tag::Scratch,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_activation(self) -> bool {
        matches!(self, Tag::Activation | Tag::Logits)
    }
}

/// FLOPs accounting buckets.
///
/// `AttnScore` holds every matmul whose extent is the causal key range:
/// `Q Kᵀ`, `P V` and their four backward products. `AttnOut` holds the
/// elementwise softmax work, counted on unmasked entries only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopCategory {
    AttnScore,
    AttnOut,
    QkvProj,
    Mlp,
    LmHead,
    Objective,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 6] = [
        FlopCategory::AttnScore,
        FlopCategory::AttnOut,
        FlopCategory::QkvProj,
        FlopCategory::Mlp,
        FlopCategory::LmHead,
        FlopCategory::Objective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::AttnScore => "attn_score",
            FlopCategory::AttnOut => "attn_out",
            FlopCategory::QkvProj => "qkv_proj",
            FlopCategory::Mlp => "mlp",
            FlopCategory::LmHead => "lm_head",
            FlopCategory::Objective => "objective",
        }
    }
}

/// Which pass of an engine run work is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Reforward,
    Backward,
    Head,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Forward, Phase::Reforward, Phase::Backward, Phase::Head];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub kind: TraceKind,
    pub bytes: u64,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub peak_activation_bytes: u64,
    pub peak_total_bytes: u64,
    pub live_activation_bytes: u64,
    pub peak_by_tag: BTreeMap<Tag, u64>,
    /// `(event_index, live activation bytes)` after every alloc/free.
    pub timeline: Vec<(u64, u64)>,
}

impl MemoryReport {
    pub fn peak_for(&self, tag: Tag) -> u64 {
        self.peak_by_tag.get(&tag).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub by_phase: BTreeMap<Phase, BTreeMap<FlopCategory, u64>>,
}

impl FlopsReport {
    pub fn get(&self, phase: Phase, category: FlopCategory) -> u64 {
        self.by_phase
            .get(&phase)
            .and_then(|m| m.get(&category))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, category: FlopCategory) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(p, category)).sum()
    }

    /// Sum over the given phases only.
    pub fn over(&self, phases: &[Phase], category: FlopCategory) -> u64 {
        phases.iter().map(|&p| self.get(p, category)).sum()
    }

    pub fn by_category(&self) -> BTreeMap<FlopCategory, u64> {
        FlopCategory::ALL
            .iter()
            .map(|&c| (c, self.total(c)))
            .collect()
    }

    pub fn grand_total(&self) -> u64 {
        FlopCategory::ALL.iter().map(|&c| self.total(c)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PassReport {
    /// Times each layer's weights entered compute during the backward pass.
    pub weight_reloads: Vec<u64>,
    pub kernel_invocations: u64,
}

#[derive(Debug, Default)]
struct Window {
    base: u64,
    peak: u64,
}

#[derive(Debug)]
struct State {
    live: [u64; 6],
    peak: [u64; 6],
    live_activation: u64,
    peak_activation: u64,
    live_total: u64,
    peak_total: u64,
    events: u64,
    timeline: Vec<(u64, u64)>,
    trace: Option<Vec<TraceEvent>>,
    window: Option<Window>,
    phase: Phase,
    flops: BTreeMap<Phase, BTreeMap<FlopCategory, u64>>,
    kernel_invocations: u64,
    weight_reloads: Vec<u64>,
}

impl Default for State {
    fn default() -> Self {
        State {
            live: [0; 6],
            peak: [0; 6],
            live_activation: 0,
            peak_activation: 0,
            live_total: 0,
            peak_total: 0,
            events: 0,
            timeline: Vec::new(),
            trace: None,
            window: None,
            phase: Phase::Forward,
            flops: BTreeMap::new(),
            kernel_invocations: 0,
            weight_reloads: Vec::new(),
        }
    }
}

/// One run's memory, FLOPs and pass counters.
///
/// Cloning yields another handle to the same counters; metered matrices keep
/// such a handle so they can report their release on drop.
#[derive(Clone, Default)]
pub struct Meter {
    state: Arc<Mutex<State>>,
}

impl fmt::Debug for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.lock();
        f.debug_struct("Meter")
            .field("live_activation", &s.live_activation)
            .field("peak_activation", &s.peak_activation)
            .field("peak_total", &s.peak_total)
            .finish()
    }
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    /// A meter that also records every alloc/free event.
    pub fn with_trace() -> Self {
        let m = Self::default();
        m.lock().trace = Some(Vec::new());
        m
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn track_alloc(&self, bytes: u64, tag: Tag) {
        let mut s = self.lock();
        let i = tag.index();
        s.live[i] += bytes;
        s.peak[i] = s.peak[i].max(s.live[i]);
        s.live_total += bytes;
        s.peak_total = s.peak_total.max(s.live_total);
        if tag.is_activation() {
            s.live_activation += bytes;
            s.peak_activation = s.peak_activation.max(s.live_activation);
            let live = s.live_activation;
            if let Some(w) = s.window.as_mut() {
                w.peak = w.peak.max(live);
            }
        }
        s.record(TraceKind::Alloc, bytes, tag);
    }

    pub fn track_free(&self, bytes: u64, tag: Tag) -> Result<()> {
        let mut s = self.lock();
        let i = tag.index();
        if s.live[i] < bytes {
            return Err(Error::AccountingBug(format!(
                "freeing {bytes} bytes of {tag:?} with only {} live",
                s.live[i]
            )));
        }
        s.live[i] -= bytes;
        s.live_total -= bytes;
        if tag.is_activation() {
            s.live_activation -= bytes;
        }
        s.record(TraceKind::Free, bytes, tag);
        Ok(())
    }

    pub fn live_bytes(&self, tag: Tag) -> u64 {
        self.lock().live[tag.index()]
    }

    pub fn live_activation_bytes(&self) -> u64 {
        self.lock().live_activation
    }

    /// Starts a peak window at the current live activation level.
    pub fn begin_window(&self) {
        let mut s = self.lock();
        let live = s.live_activation;
        s.window = Some(Window {
            base: live,
            peak: live,
        });
    }

    /// Activation bytes allocated above the window's starting level at the
    /// window's peak. Ends the window.
    pub fn end_window(&self) -> u64 {
        let mut s = self.lock();
        s.window.take().map(|w| w.peak - w.base).unwrap_or(0)
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn add_flops(&self, category: FlopCategory, count: u64) {
        let mut s = self.lock();
        let phase = s.phase;
        *s.flops.entry(phase).or_default().entry(category).or_default() += count;
        s.kernel_invocations += 1;
    }

    pub fn record_weight_load(&self, layer: usize) {
        let mut s = self.lock();
        if s.weight_reloads.len() <= layer {
            s.weight_reloads.resize(layer + 1, 0);
        }
        s.weight_reloads[layer] += 1;
    }

    pub fn memory_report(&self) -> MemoryReport {
        let s = self.lock();
        MemoryReport {
            peak_activation_bytes: s.peak_activation,
            peak_total_bytes: s.peak_total,
            live_activation_bytes: s.live_activation,
            peak_by_tag: Tag::ALL.iter().map(|&t| (t, s.peak[t.index()])).collect(),
            timeline: s.timeline.clone(),
        }
    }

    pub fn flops_report(&self) -> FlopsReport {
        FlopsReport {
            by_phase: self.lock().flops.clone(),
        }
    }

    pub fn pass_report(&self) -> PassReport {
        let s = self.lock();
        PassReport {
            weight_reloads: s.weight_reloads.clone(),
            kernel_invocations: s.kernel_invocations,
        }
    }

    pub fn trace(&self) -> Option<Vec<TraceEvent>> {
        self.lock().trace.clone()
    }
}

impl State {
    fn record(&mut self, kind: TraceKind, bytes: u64, tag: Tag) {
        self.events += 1;
        let sample = (self.events, self.live_activation);
        self.timeline.push(sample);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent { kind, bytes, tag });
        }
    }
}

/// RAII registration of bytes that live outside a metered matrix, such as
/// parameters handed to an engine.
pub struct Residency {
    meter: Meter,
    bytes: u64,
    tag: Tag,
}

impl Residency {
    pub fn new(meter: &Meter, bytes: u64, tag: Tag) -> Self {
        meter.track_alloc(bytes, tag);
        Residency {
            meter: meter.clone(),
            bytes,
            tag,
        }
    }
}

impl Drop for Residency {
    fn drop(&mut self) {
        if let Err(e) = self.meter.track_free(self.bytes, self.tag) {
            panic!("{e}");
        }
    }
}

/// A reduced non-negative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `a / b == self`, checked by cross-multiplication.
    pub fn matches(self, a: u64, b: u64) -> bool {
        a as u128 * self.den as u128 == b as u128 * self.num as u128
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Predicted attention-score FLOPs of chunked over full computation,
/// `(1 + D) / (2 D)`. Independent of `seq_len` and `hidden`, which are only
/// checked for consistency.
pub fn flops_ratio_attention(seq_len: usize, hidden: usize, chunks: usize) -> Result<Ratio> {
    if chunks == 0 {
        return Err(Error::Domain("partition count must be >= 1".into()));
    }
    if seq_len == 0 || hidden == 0 {
        return Err(Error::Domain("sequence length and width must be >= 1".into()));
    }
    if seq_len % chunks != 0 {
        return Err(Error::Domain(format!(
            "partition count {chunks} does not divide sequence length {seq_len}"
        )));
    }
    Ok(Ratio::new(1 + chunks as u64, 2 * chunks as u64))
}
