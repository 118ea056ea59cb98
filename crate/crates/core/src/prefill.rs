//! Prefill KV-cache transfer overlap model.
//!
//! Incoming prompt KV chunks land in the transfer buffer and drain to local
//! DRAM around the PE's own traffic. The schedule is cycle-quantized and
//! deterministic. Each cycle:
//!
//! 1. Arrivals due this cycle join the pending stock; an arrival that does
//!    not fully fit the buffer is counted as stalled (link backpressure) and
//!    its excess enters as space frees.
//! 2. With DRAM utilization `u` below the fine-grained threshold, the stock
//!    drains at the idle bandwidth `(1-u)·bw`, charging nothing.
//! 3. At or above the threshold (memory-bound), bytes accumulate until the
//!    buffered amount reaches the adaptive burst threshold
//!    `cap·(base + slope·u)`, then drain at full bandwidth until empty; the
//!    stolen share `u` of every burst cycle is charged as non-overlapped.
//! 4. Once the last arrival is in, coarse mode flushes without waiting for
//!    the threshold (the stream is known complete).
//!
//! Outside and after the busy trace the DRAM is idle (`u = 0`). The
//! implementation walks whole intervals in closed form; a literal per-cycle
//! replay of the same rules must reproduce it to rounding error.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalEvent {
    pub cycle: u64,
    pub bytes: f64,
}

/// One interval of PE activity with its DRAM utilization in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BusySegment {
    pub start: u64,
    pub end: u64,
    pub dram_util: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DrainMode {
    FineGrained,
    CoarseBurst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrainWindow {
    pub start: u64,
    pub end: u64,
    pub bytes: f64,
    pub mode: DrainMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferOutcome {
    /// Contiguous drain windows, for inspection.
    pub plan: Vec<DrainWindow>,
    /// Cycles stolen from computation.
    pub non_overlapped_cycles: f64,
    /// End of the cycle in which the last byte reached DRAM.
    pub finish_cycle: u64,
    /// Arrivals that could not fully enter the buffer on their cycle.
    pub stalled_arrivals: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    pub buffer_bytes: f64,
    pub dram_bytes_per_cycle: f64,
    /// Utilization at or above which draining switches to coarse bursts.
    pub fine_util_max: f64,
    /// Burst threshold = cap·(base + slope·u), clamped to [0, 1]·cap.
    pub burst_frac_base: f64,
    pub burst_frac_slope: f64,
}

impl TransferConfig {
    pub fn new(buffer_bytes: f64, dram_bytes_per_cycle: f64) -> Self {
        Self {
            buffer_bytes,
            dram_bytes_per_cycle,
            fine_util_max: 0.95,
            burst_frac_base: 0.25,
            burst_frac_slope: 0.5,
        }
    }

    pub fn burst_threshold(&self, util: f64) -> f64 {
        self.buffer_bytes * (self.burst_frac_base + self.burst_frac_slope * util).clamp(0.0, 1.0)
    }
}

pub fn util_at(busy: &[BusySegment], cycle: u64) -> f64 {
    for seg in busy {
        if cycle >= seg.start && cycle < seg.end {
            return seg.dram_util;
        }
    }
    0.0
}

/// Next cycle after `cycle` at which the utilization may change.
fn next_util_edge(busy: &[BusySegment], cycle: u64) -> u64 {
    let mut next = u64::MAX;
    for seg in busy {
        if seg.start > cycle {
            next = next.min(seg.start);
        }
        if seg.end > cycle {
            next = next.min(seg.end);
        }
    }
    next
}

/// Plan the transfer of `arrivals` against the PE activity in `busy`.
/// Arrivals must be sorted by cycle; segments sorted and disjoint.
pub fn prefill_transfer_schedule(
    arrivals: &[ArrivalEvent],
    busy: &[BusySegment],
    cfg: &TransferConfig,
) -> TransferOutcome {
    assert!(arrivals.windows(2).all(|w| w[0].cycle <= w[1].cycle), "arrivals must be sorted");
    assert!(
        busy.windows(2).all(|w| w[0].end <= w[1].start),
        "busy segments must be sorted and disjoint"
    );
    let bw = cfg.dram_bytes_per_cycle;
    let cap = cfg.buffer_bytes;
    let mut plan: Vec<DrainWindow> = Vec::new();
    let mut stalled = 0u32;
    let mut non_overlap = 0.0f64;
    let mut finish = 0u64;

    // Bytes accepted but not yet written; the visible buffer is
    // min(stock, cap), the rest backs up on the link.
    let mut stock = 0.0f64;
    let mut bursting = false;
    let mut next_arrival = 0usize;
    let mut cycle: u64 = arrivals.first().map_or(0, |a| a.cycle);

    let mut record = |plan: &mut Vec<DrainWindow>, start: u64, end: u64, bytes: f64, mode| {
        if bytes <= 0.0 {
            return;
        }
        if let Some(last) = plan.last_mut() {
            if last.mode == mode && last.end == start {
                last.end = end;
                last.bytes += bytes;
                return;
            }
        }
        plan.push(DrainWindow { start, end, bytes, mode });
    };

    loop {
        while next_arrival < arrivals.len() && arrivals[next_arrival].cycle <= cycle {
            let a = arrivals[next_arrival];
            if stock.min(cap) + a.bytes > cap {
                stalled += 1;
            }
            stock += a.bytes;
            next_arrival += 1;
        }
        if stock <= 0.0 {
            match arrivals.get(next_arrival) {
                Some(a) => {
                    cycle = a.cycle;
                    continue;
                }
                None => break,
            }
        }

        let u = util_at(busy, cycle);
        let stream_done = next_arrival >= arrivals.len();
        let horizon = {
            let mut h = next_util_edge(busy, cycle);
            if let Some(a) = arrivals.get(next_arrival) {
                h = h.min(a.cycle);
            }
            h
        };
        let span = if horizon == u64::MAX { u64::MAX } else { horizon - cycle };

        let rate = if u < cfg.fine_util_max {
            bursting = false;
            (1.0 - u) * bw
        } else if bursting || stream_done || stock.min(cap) >= cfg.burst_threshold(u) {
            bursting = true;
            bw
        } else {
            // Accumulate until the threshold or a mode change. The stream is
            // not done, so another arrival bounds the horizon.
            debug_assert!(horizon != u64::MAX);
            cycle = horizon;
            continue;
        };
        let mode = if bursting { DrainMode::CoarseBurst } else { DrainMode::FineGrained };

        let cycles_to_empty = (stock / rate).ceil() as u64;
        if span == u64::MAX || cycles_to_empty <= span {
            let end = cycle + cycles_to_empty;
            record(&mut plan, cycle, end, stock, mode);
            if bursting {
                non_overlap += u * stock / bw;
                bursting = false;
            }
            finish = finish.max(end);
            stock = 0.0;
            cycle = end;
        } else {
            let drained = span as f64 * rate;
            record(&mut plan, cycle, horizon, drained, mode);
            if bursting {
                non_overlap += u * span as f64;
            }
            stock -= drained;
            finish = finish.max(horizon);
            cycle = horizon;
        }
    }

    TransferOutcome {
        plan,
        non_overlapped_cycles: non_overlap,
        finish_cycle: finish,
        stalled_arrivals: stalled,
    }
}
