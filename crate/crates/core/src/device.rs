//! Per-iteration latency/energy model of one device.
//!
//! PE compute is an analytic roofline with full compute/memory overlap:
//! every operator costs `max(bytes/bandwidth, flops/throughput)` cycles on
//! its PE, with explicit derating knobs instead of cycle-level DRAM timing.
//! A decoding iteration composes the FC / collective / attention chain per
//! layer and tags every entry as PE compute, intra-device communication, or
//! inter-device communication.

use crate::blocks::imbalance_ratio;
use crate::collectives::{self, CommSchedule};
use crate::mesh::{Axis, MeshConfig, Pe};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("per-PE tile does not fit the compute buffer even at single-row sub-tiling")]
    TileTooLarge,
    #[error("placement exceeds device KV capacity")]
    OutOfMemory,
    #[error(transparent)]
    Comm(#[from] collectives::CommError),
}

/// Energy coefficients in pJ per unit. The NoC coefficient is a calibration
/// knob; the others default to measured figures for this device class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoeffs {
    pub pj_per_flop: f64,
    pub pj_per_dram_bit: f64,
    pub pj_per_sram_bit: f64,
    pub pj_per_noc_bit: f64,
    pub pj_per_link_bit: f64,
}

impl Default for EnergyCoeffs {
    fn default() -> Self {
        Self {
            pj_per_flop: 0.43,
            pj_per_dram_bit: 0.66,
            pj_per_sram_bit: 0.019,
            pj_per_noc_bit: 0.10,
            pj_per_link_bit: 1.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub mesh: MeshConfig,
    /// FLOP per cycle per PE.
    pub mac_flops_per_cycle: f64,
    /// Clock, GHz (cycles to seconds).
    pub frequency_ghz: f64,
    /// Local DRAM bytes per cycle per PE (banks-per-PE × per-bank rate).
    pub dram_bytes_per_cycle: f64,
    /// Banks stacked over one PE; `banks_per_pe × side²` must equal
    /// `total_banks` per die.
    pub banks_per_pe: u32,
    pub total_banks: u32,
    pub compute_buffer_bytes: f64,
    pub transfer_buffer_bytes: f64,
    /// Elementwise throughput of the vector/softmax units, elems per cycle.
    pub vector_lanes: f64,
    /// KV blocks per PE (M).
    pub blocks_per_pe: u32,
    /// Local DRAM capacity per PE, bytes.
    pub dram_capacity_bytes_per_pe: f64,
    /// Per-block DRAM access overhead in bytes-equivalent; smaller KV blocks
    /// see a lower effective bandwidth (calibration knob).
    pub dram_block_overhead_bytes: f64,
    pub energy: EnergyCoeffs,
    /// Tensor-parallel group size sharing work over the external link.
    pub tp_degree: u32,
    /// Expert-parallel group size (1 = all experts local).
    pub ep_degree: u32,
    /// External link bytes per cycle (device router plane).
    pub link_bytes_per_cycle: f64,
}

impl DeviceConfig {
    /// Paper-scale device: 4×4 PEs, 256 banks per die in a 16×16 grid,
    /// 1 GHz, 512 16-MAC FPUs and ~1 KiB/cycle of local DRAM per PE.
    pub fn full_scale() -> Self {
        Self {
            mesh: MeshConfig::new(4, 32.0, 2.0),
            mac_flops_per_cycle: 16384.0,
            frequency_ghz: 1.0,
            dram_bytes_per_cycle: 1024.0,
            banks_per_pe: 16,
            total_banks: 256,
            compute_buffer_bytes: 2.5 * 1024.0 * 1024.0,
            transfer_buffer_bytes: 2.5 * 1024.0 * 1024.0,
            vector_lanes: 256.0,
            blocks_per_pe: 4096,
            dram_capacity_bytes_per_pe: 5.12e9,
            dram_block_overhead_bytes: 256.0,
            energy: EnergyCoeffs::default(),
            tp_degree: 8,
            ep_degree: 1,
            link_bytes_per_cycle: 600.0,
        }
    }

    /// Slow desk-scale variant used by the serving presets: same shape,
    /// scaled-down clock and throughput so queueing effects show up at
    /// small request counts.
    pub fn desk_scale() -> Self {
        Self {
            mesh: MeshConfig::new(4, 16.0, 2.0),
            mac_flops_per_cycle: 256.0,
            frequency_ghz: 0.1,
            dram_bytes_per_cycle: 16.0,
            banks_per_pe: 16,
            total_banks: 256,
            compute_buffer_bytes: 256.0 * 1024.0,
            transfer_buffer_bytes: 256.0 * 1024.0,
            vector_lanes: 64.0,
            blocks_per_pe: 32,
            dram_capacity_bytes_per_pe: 4.0 * 1024.0 * 1024.0,
            dram_block_overhead_bytes: 256.0,
            energy: EnergyCoeffs::default(),
            tp_degree: 1,
            ep_degree: 1,
            link_bytes_per_cycle: 600.0,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        self.mesh.validate().map_err(DeviceError::BadConfig)?;
        let side2 = (self.mesh.side * self.mesh.side) as u32;
        if self.banks_per_pe * side2 != self.total_banks {
            return Err(DeviceError::BadConfig(format!(
                "banks_per_pe ({}) × PEs ({side2}) != total banks ({})",
                self.banks_per_pe, self.total_banks
            )));
        }
        let positive = [
            self.mac_flops_per_cycle,
            self.frequency_ghz,
            self.dram_bytes_per_cycle,
            self.compute_buffer_bytes,
            self.transfer_buffer_bytes,
            self.vector_lanes,
            self.link_bytes_per_cycle,
        ];
        if positive.iter().any(|v| *v <= 0.0) || self.blocks_per_pe == 0 {
            return Err(DeviceError::BadConfig("rates and sizes must be positive".into()));
        }
        if self.tp_degree == 0 || self.ep_degree == 0 {
            return Err(DeviceError::BadConfig("parallel degrees must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pe_count(&self) -> usize {
        self.mesh.pe_count()
    }

    /// Effective DRAM bandwidth reading KV blocks of `block_bytes`.
    pub fn kv_read_efficiency(&self, block_bytes: f64) -> f64 {
        block_bytes / (block_bytes + self.dram_block_overhead_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Mha,
    Gqa,
    Mqa,
    Mla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfnKind {
    Dense,
    Glu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Latent-attention dimensions (present when `attention = Mla`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlaDims {
    pub kv_latent: u64,
    pub rope_dim: u64,
    pub q_latent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: u32,
    pub hidden: u64,
    pub intermediate: u64,
    pub q_heads: u32,
    pub kv_heads: u32,
    pub head_dim: u64,
    pub attention: AttentionKind,
    pub mla: Option<MlaDims>,
    pub ffn: FfnKind,
    /// 0 = dense FFN.
    pub experts: u32,
    pub top_k: u32,
    pub norm: NormKind,
    pub bytes_per_elem: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.layers == 0 || self.hidden == 0 || self.q_heads == 0 || self.head_dim == 0 {
            return Err(DeviceError::BadConfig("model dims must be positive".into()));
        }
        if self.attention != AttentionKind::Mla {
            if self.kv_heads == 0 || self.q_heads % self.kv_heads != 0 {
                return Err(DeviceError::BadConfig(
                    "q_heads must be a positive multiple of kv_heads".into(),
                ));
            }
        } else if self.mla.is_none() {
            return Err(DeviceError::BadConfig("latent attention needs its dims".into()));
        }
        if self.experts > 0 && self.top_k == 0 {
            return Err(DeviceError::BadConfig("expert models need top_k >= 1".into()));
        }
        Ok(())
    }

    /// Query heads served by one device in a TP group.
    pub fn q_heads_per_device(&self, tp: u32) -> u64 {
        (self.q_heads as u64).div_ceil(tp as u64).max(1)
    }

    /// KV heads served by one device; never below one (heads replicate when
    /// the group is wider than the head count).
    pub fn kv_heads_per_device(&self, tp: u32) -> u64 {
        ((self.kv_heads as u64) / tp as u64).max(1)
    }

    /// Bytes appended to the KV cache per token per device.
    pub fn kv_bytes_per_token(&self, tp: u32) -> u64 {
        match (self.attention, self.mla) {
            (AttentionKind::Mla, Some(d)) => (d.kv_latent + d.rope_dim) * self.bytes_per_elem,
            _ => self.kv_heads_per_device(tp) * 2 * self.head_dim * self.bytes_per_elem,
        }
    }
}

/// Cycles plus the device-total activity counters of one operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OpCost {
    pub cycles: f64,
    pub flops: f64,
    pub dram_bytes: f64,
    pub sram_bytes: f64,
}

/// Roofline of a fully-connected operator partitioned (H_in/m, H_out/m)
/// per PE with the batch left intact. Weights and activations stream from
/// DRAM with full compute/memory overlap; partial-sum accumulation is hidden
/// behind the next tile's GEMM. Sub-tiles along H_in automatically when the
/// per-PE tile exceeds the compute buffer.
pub fn fc_latency(
    batch: u64,
    h_in: u64,
    h_out: u64,
    device: &DeviceConfig,
    bytes_per_elem: u64,
) -> Result<OpCost, DeviceError> {
    let m = device.mesh.side as u64;
    let tile_in = h_in.div_ceil(m) as f64;
    let tile_out = h_out.div_ceil(m) as f64;
    let b = batch as f64;
    let e = bytes_per_elem as f64;

    // Smallest K-split whose working set fits the compute buffer.
    let out_bytes = b * tile_out * e;
    let avail = device.compute_buffer_bytes - out_bytes;
    if avail <= 0.0 {
        return Err(DeviceError::TileTooLarge);
    }
    let rows_fit = (avail / ((tile_out + b) * e)).floor();
    if rows_fit < 1.0 {
        return Err(DeviceError::TileTooLarge);
    }
    let k_split = (tile_in / rows_fit).ceil().max(1.0);

    let flops_pe = 2.0 * b * tile_in * tile_out;
    let weight_bytes = tile_in * tile_out * e;
    let act_bytes = b * (tile_in + tile_out) * e;
    let dram_pe = weight_bytes + act_bytes;
    let cycles = (dram_pe / device.dram_bytes_per_cycle).max(flops_pe / device.mac_flops_per_cycle);
    let sram_pe = weight_bytes + act_bytes + (k_split - 1.0) * 2.0 * b * tile_out * e;

    let pes = device.pe_count() as f64;
    Ok(OpCost {
        cycles,
        flops: flops_pe * pes,
        dram_bytes: dram_pe * pes,
        sram_bytes: sram_pe * pes,
    })
}

/// Per-PE decode attention roofline over the resident tokens.
///
/// Each PE walks its macro blocks (sized to fill half the compute buffer for
/// double buffering), alternating matrix and vector groups so vector time
/// contributes only where it exceeds the paired GEMM time.
pub struct AttentionCost {
    pub per_pe_cycles: Vec<f64>,
    pub cost: OpCost,
}

/// Scalar vector-unit operations per score element (max/exp/sum/scale).
const VEC_OPS_PER_SCORE: f64 = 4.0;

pub fn attention_latency(
    per_pe_tokens: &[f64],
    kv_bytes_per_token: f64,
    flops_per_token: f64,
    vec_elems_per_token: f64,
    kv_block_bytes: f64,
    device: &DeviceConfig,
) -> AttentionCost {
    let eff_bw = device.dram_bytes_per_cycle * device.kv_read_efficiency(kv_block_bytes);
    let macro_tokens =
        ((device.compute_buffer_bytes / 2.0) / kv_bytes_per_token).floor().max(1.0);
    let mut per_pe = Vec::with_capacity(per_pe_tokens.len());
    let mut cost = OpCost::default();
    for &t in per_pe_tokens {
        if t <= 0.0 {
            per_pe.push(0.0);
            continue;
        }
        let gemm_total = ((t * kv_bytes_per_token) / eff_bw)
            .max(t * flops_per_token / device.mac_flops_per_cycle);
        let vec_total = t * vec_elems_per_token / device.vector_lanes;
        // Two alternating groups per macro block; vector work of one group
        // hides behind the next group's GEMM.
        let groups = 2.0 * (t / macro_tokens).ceil();
        let g = gemm_total / groups;
        let v = vec_total / groups;
        let cycles = gemm_total + (groups - 1.0) * (v - g).max(0.0) + v;
        per_pe.push(cycles);
        cost.flops += t * flops_per_token;
        cost.dram_bytes += t * kv_bytes_per_token;
        cost.sram_bytes += t * (kv_bytes_per_token + vec_elems_per_token);
        cost.cycles = f64::max(cost.cycles, cycles);
    }
    AttentionCost { per_pe_cycles: per_pe, cost }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatencyKind {
    PeCompute,
    IntraDeviceComm,
    InterDeviceComm,
}

/// The five intra-device communication flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommFlow {
    QueryReplication,
    KvDelivery,
    AttnOutputReduction,
    FcAllReduce,
    NormReduce,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub name: String,
    pub kind: LatencyKind,
    pub cycles: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyCounters {
    pub flops: f64,
    pub dram_bytes: f64,
    pub sram_bytes: f64,
    pub noc_bytes: f64,
    pub link_bytes: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub flop_j: f64,
    pub dram_j: f64,
    pub sram_j: f64,
    pub noc_j: f64,
    pub link_j: f64,
}

impl EnergyBreakdown {
    pub fn total_j(&self) -> f64 {
        self.flop_j + self.dram_j + self.sram_j + self.noc_j + self.link_j
    }
}

/// Energy from activity counters: FLOP, DRAM-bit, SRAM-bit, NoC-bit, and
/// external-link-bit terms, each linear with its configured coefficient.
pub fn energy_estimate(counters: &EnergyCounters, coeffs: &EnergyCoeffs) -> EnergyBreakdown {
    let pj = 1e-12;
    EnergyBreakdown {
        flop_j: counters.flops * coeffs.pj_per_flop * pj,
        dram_j: counters.dram_bytes * 8.0 * coeffs.pj_per_dram_bit * pj,
        sram_j: counters.sram_bytes * 8.0 * coeffs.pj_per_sram_bit * pj,
        noc_j: counters.noc_bytes * 8.0 * coeffs.pj_per_noc_bit * pj,
        link_j: counters.link_bytes * 8.0 * coeffs.pj_per_link_bit * pj,
    }
}

/// Per-iteration latency/energy breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct IterationReport {
    pub entries: Vec<ReportEntry>,
    pub comm_cycles: BTreeMap<CommFlow, f64>,
    pub x_traffic_bytes: f64,
    pub y_traffic_bytes: f64,
    pub per_pe_attention_cycles: Vec<f64>,
    pub counters: EnergyCounters,
    pub energy: EnergyBreakdown,
}

impl IterationReport {
    fn new(pe_count: usize) -> Self {
        Self {
            entries: Vec::new(),
            comm_cycles: BTreeMap::new(),
            x_traffic_bytes: 0.0,
            y_traffic_bytes: 0.0,
            per_pe_attention_cycles: vec![0.0; pe_count],
            counters: EnergyCounters::default(),
            energy: EnergyBreakdown::default(),
        }
    }

    pub fn total_cycles(&self) -> f64 {
        self.entries.iter().map(|e| e.cycles).sum()
    }

    pub fn cycles_of(&self, kind: LatencyKind) -> f64 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.cycles).sum()
    }

    pub fn x_traffic_fraction(&self) -> f64 {
        let total = self.x_traffic_bytes + self.y_traffic_bytes;
        if total <= 0.0 {
            0.0
        } else {
            self.x_traffic_bytes / total
        }
    }

    pub fn attention_imbalance(&self) -> f64 {
        imbalance_ratio(&self.per_pe_attention_cycles)
    }

    pub fn seconds(&self, device: &DeviceConfig) -> f64 {
        self.total_cycles() / (device.frequency_ghz * 1e9)
    }
}

/// Where each request's newly produced KV vector must land, plus the token
/// placement the attention roofline runs over.
#[derive(Debug, Clone)]
pub struct BatchPlacement {
    /// Resident tokens per PE (linear index), summed over the batch.
    pub per_pe_tokens: Vec<f64>,
    /// Request id -> PE holding its last block.
    pub targets: Vec<(u32, Pe)>,
    /// Tokens per KV block (sets the contiguous-read efficiency).
    pub kv_block_tokens: u64,
}

impl BatchPlacement {
    pub fn batch_size(&self) -> usize {
        self.targets.len()
    }

    /// Even spread of `tokens_per_request` tokens for a batch, with targets
    /// walking the grid row-major.
    pub fn uniform(batch: usize, tokens_per_request: u64, mesh: &MeshConfig) -> Self {
        let pes = mesh.pe_count();
        let total = batch as u64 * tokens_per_request;
        let per_pe = vec![total as f64 / pes as f64; pes];
        let targets = (0..batch as u32)
            .map(|i| (i, Pe::from_index(i as usize % pes, mesh.side)))
            .collect();
        Self { per_pe_tokens: per_pe, targets, kv_block_tokens: 64 }
    }
}

/// Sample per-expert token loads from a categorical router distribution
/// (uniform when `weights` is empty).
pub fn sample_expert_loads(
    experts: u32,
    top_k: u32,
    tokens: u64,
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut loads = vec![0.0f64; experts as usize];
    if experts == 0 {
        return loads;
    }
    let cumulative: Vec<f64> = if weights.is_empty() {
        (0..experts).map(|i| (i + 1) as f64 / experts as f64).collect()
    } else {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        weights.iter().map(|w| {
            acc += w / total;
            acc
        }).collect()
    };
    for _ in 0..tokens {
        // Draw top_k distinct experts per token.
        let mut chosen = Vec::with_capacity(top_k as usize);
        while chosen.len() < (top_k as usize).min(experts as usize) {
            let r: f64 = rng.gen();
            let e = cumulative.partition_point(|c| *c < r).min(experts as usize - 1);
            if !chosen.contains(&e) {
                chosen.push(e);
            }
        }
        for e in chosen {
            loads[e] += 1.0;
        }
    }
    loads
}

struct ReportBuilder<'a> {
    device: &'a DeviceConfig,
    report: IterationReport,
}

impl<'a> ReportBuilder<'a> {
    fn new(device: &'a DeviceConfig) -> Self {
        Self { device, report: IterationReport::new(device.pe_count()) }
    }

    fn compute(&mut self, name: &str, cost: OpCost) {
        self.report.entries.push(ReportEntry {
            name: name.into(),
            kind: LatencyKind::PeCompute,
            cycles: cost.cycles,
        });
        self.report.counters.flops += cost.flops;
        self.report.counters.dram_bytes += cost.dram_bytes;
        self.report.counters.sram_bytes += cost.sram_bytes;
    }

    fn comm(&mut self, name: &str, flow: CommFlow, schedule: &CommSchedule) {
        let cycles = collectives::cost_of_schedule(schedule, &self.device.mesh);
        self.report.entries.push(ReportEntry {
            name: name.into(),
            kind: LatencyKind::IntraDeviceComm,
            cycles,
        });
        *self.report.comm_cycles.entry(flow).or_insert(0.0) += cycles;
        let (x, y) = schedule.axis_bytes();
        self.report.x_traffic_bytes += x;
        self.report.y_traffic_bytes += y;
        self.report.counters.noc_bytes += x + y;
    }

    /// Parametric inter-device collective on the router plane: a ring
    /// all-reduce over the `degree`-wide group.
    fn inter_device(&mut self, name: &str, payload_bytes: f64, degree: u32) {
        if degree <= 1 || payload_bytes <= 0.0 {
            return;
        }
        let d = degree as f64;
        let bytes = 2.0 * (d - 1.0) / d * payload_bytes;
        let cycles = bytes / self.device.link_bytes_per_cycle;
        self.report.entries.push(ReportEntry {
            name: name.into(),
            kind: LatencyKind::InterDeviceComm,
            cycles,
        });
        self.report.counters.link_bytes += bytes;
    }

    fn finish(mut self) -> IterationReport {
        self.report.energy = energy_estimate(&self.report.counters, &self.device.energy);
        self.report
    }
}

/// Full decoding iteration: per layer, the QKV projection, query replication
/// and key/value delivery, distributed tiled attention, attention-output
/// reduction, output projection, the FC all-reduce chain, normalization
/// merges, and the FFN/GLU/MoE (or latent-attention) block; plus the
/// parametric inter-device term for TP groups.
///
/// Consecutive chained-FC all-reduces alternate axes (tile placements are
/// transposed per FC, and mirrored on odd layers) so traffic balances across
/// mesh dimensions.
pub fn decode_iteration_latency(
    model: &ModelConfig,
    placement: &BatchPlacement,
    moe_loads: &[f64],
    device: &DeviceConfig,
) -> Result<IterationReport, DeviceError> {
    model.validate()?;
    device.validate()?;
    if placement.targets.is_empty() {
        return Err(DeviceError::BadConfig("batch must be non-empty".into()));
    }
    let tp = device.tp_degree;
    let kv_per_token = model.kv_bytes_per_token(tp) as f64;
    let max_pe_tokens = placement.per_pe_tokens.iter().cloned().fold(0.0f64, f64::max);
    if max_pe_tokens * kv_per_token > device.dram_capacity_bytes_per_pe {
        return Err(DeviceError::OutOfMemory);
    }

    let mut rb = ReportBuilder::new(device);
    let b = placement.batch_size() as u64;
    let e = model.bytes_per_elem;
    let m = device.mesh.side as f64;
    let q_dev = model.q_heads_per_device(tp);
    let q_dim = q_dev * model.head_dim;
    let block_bytes = placement.kv_block_tokens as f64 * kv_per_token;

    for layer in 0..model.layers {
        // Chained-FC reduce axes for this layer (even layers X-major).
        let (ax_attn_out, ax_f1, ax_f2) = if layer % 2 == 0 {
            (Axis::X, Axis::X, Axis::Y)
        } else {
            (Axis::Y, Axis::Y, Axis::X)
        };

        match model.attention {
            AttentionKind::Mla => {
                let dims = model.mla.expect("validated");
                rb.compute(
                    "latent_down_proj",
                    fc_latency(b, model.hidden, dims.q_latent + dims.rope_dim + dims.kv_latent, device, e)?,
                );
                let kv_vec = (dims.kv_latent + dims.rope_dim) * e;
                rb.comm(
                    "kv_latent_delivery",
                    CommFlow::KvDelivery,
                    &collectives::kv_vector_delivery(&placement.targets, kv_vec as f64, &device.mesh)?,
                );
                rb.comm(
                    "q_latent_all_reduce",
                    CommFlow::FcAllReduce,
                    &collectives::all_reduce_1d(
                        ax_attn_out,
                        (b * dims.q_latent * e) as f64 / m,
                        &device.mesh,
                    )?,
                );
                rb.compute(
                    "q_up_proj",
                    fc_latency(b, dims.q_latent, q_dev * (model.head_dim + dims.rope_dim), device, e)?,
                );
                rb.comm(
                    "q_up_all_reduce",
                    CommFlow::FcAllReduce,
                    &collectives::all_reduce_1d(
                        ax_attn_out.other(),
                        (b * q_dim * e) as f64 / m,
                        &device.mesh,
                    )?,
                );
                rb.compute(
                    "q_absorb_gemm",
                    fc_latency(b * q_dev, model.head_dim, dims.kv_latent, device, e)?,
                );
                let q_ext = q_dev * (dims.kv_latent + dims.rope_dim) * e;
                rb.comm(
                    "query_replication",
                    CommFlow::QueryReplication,
                    &collectives::query_replication((b * q_ext) as f64, &device.mesh)?,
                );
                let flops_tok =
                    q_dev as f64 * 2.0 * ((dims.kv_latent + dims.rope_dim) + dims.kv_latent) as f64;
                let attn = attention_latency(
                    &placement.per_pe_tokens,
                    kv_per_token,
                    flops_tok,
                    q_dev as f64 * VEC_OPS_PER_SCORE,
                    block_bytes,
                    device,
                );
                add_attention(&mut rb, attn);
                rb.comm(
                    "attn_output_reduction",
                    CommFlow::AttnOutputReduction,
                    &collectives::attn_output_reduction(
                        (b * q_dev * dims.kv_latent * e) as f64,
                        &device.mesh,
                    )?,
                );
                rb.compute(
                    "v_up_proj",
                    fc_latency(b * q_dev, dims.kv_latent, model.head_dim, device, e)?,
                );
                rb.compute("output_proj", fc_latency(b, q_dim, model.hidden, device, e)?);
            }
            _ => {
                let kv_dev = model.kv_heads_per_device(tp);
                rb.compute(
                    "qkv_fc",
                    fc_latency(b, model.hidden, (q_dev + 2 * kv_dev) * model.head_dim, device, e)?,
                );
                rb.comm(
                    "query_replication",
                    CommFlow::QueryReplication,
                    &collectives::query_replication((b * q_dim * e) as f64, &device.mesh)?,
                );
                let kv_vec = kv_dev * 2 * model.head_dim * e;
                rb.comm(
                    "kv_vector_delivery",
                    CommFlow::KvDelivery,
                    &collectives::kv_vector_delivery(&placement.targets, kv_vec as f64, &device.mesh)?,
                );
                let flops_tok = q_dev as f64 * 4.0 * model.head_dim as f64;
                let attn = attention_latency(
                    &placement.per_pe_tokens,
                    kv_per_token,
                    flops_tok,
                    q_dev as f64 * VEC_OPS_PER_SCORE,
                    block_bytes,
                    device,
                );
                add_attention(&mut rb, attn);
                rb.comm(
                    "attn_output_reduction",
                    CommFlow::AttnOutputReduction,
                    &collectives::attn_output_reduction((b * q_dim * e) as f64, &device.mesh)?,
                );
                rb.compute("output_proj", fc_latency(b, q_dim, model.hidden, device, e)?);
            }
        }

        rb.comm(
            "output_proj_all_reduce",
            CommFlow::FcAllReduce,
            &collectives::all_reduce_1d(ax_attn_out, (b * model.hidden * e) as f64 / m, &device.mesh)?,
        );
        rb.inter_device("attn_tp_all_reduce", (b * model.hidden * e) as f64, device.tp_degree);
        norm_reduce(&mut rb, model, b)?;

        // FFN / GLU / MoE.
        if model.experts == 0 {
            ffn_block(&mut rb, model, b as f64, model.intermediate, ax_f1, ax_f2, device, "ffn")?;
        } else {
            rb.compute("router_fc", fc_latency(b, model.hidden, model.experts as u64, device, e)?);
            rb.comm(
                "router_all_reduce",
                CommFlow::FcAllReduce,
                &collectives::all_reduce_1d(
                    ax_f1,
                    (b * model.experts as u64 * e) as f64 / m,
                    &device.mesh,
                )?,
            );
            let local_experts = (model.experts / device.ep_degree).max(1);
            let loads = effective_loads(moe_loads, model, b);
            for (idx, tokens) in loads.iter().take(local_experts as usize).enumerate() {
                if *tokens <= 0.0 {
                    continue;
                }
                ffn_block(
                    &mut rb,
                    model,
                    *tokens,
                    model.intermediate,
                    ax_f1,
                    ax_f2,
                    device,
                    &format!("expert{idx}"),
                )?;
            }
            // EP dispatch/combine over the external link.
            rb.inter_device(
                "moe_ep_exchange",
                2.0 * (b * model.hidden * e) as f64,
                device.ep_degree,
            );
        }
        rb.inter_device("ffn_tp_all_reduce", (b * model.hidden * e) as f64, device.tp_degree);
        norm_reduce(&mut rb, model, b)?;
    }

    Ok(rb.finish())
}

fn add_attention(rb: &mut ReportBuilder<'_>, attn: AttentionCost) {
    for (acc, v) in rb.report.per_pe_attention_cycles.iter_mut().zip(&attn.per_pe_cycles) {
        *acc += *v;
    }
    rb.compute("attention", attn.cost);
}

/// Normalization-statistic merge: a scalar all-reduce on each axis
/// (mean+variance pairs for LayerNorm, squared sums only for RMSNorm).
fn norm_reduce(rb: &mut ReportBuilder<'_>, model: &ModelConfig, b: u64) -> Result<(), DeviceError> {
    let scalars = match model.norm {
        NormKind::LayerNorm => 2,
        NormKind::RmsNorm => 1,
    };
    let bytes = (b * scalars * model.bytes_per_elem) as f64;
    let mesh = &rb.device.mesh;
    let x = collectives::all_reduce_1d(Axis::X, bytes, mesh)?;
    rb.comm("norm_all_reduce_x", CommFlow::NormReduce, &x);
    let y = collectives::all_reduce_1d(Axis::Y, bytes, mesh)?;
    rb.comm("norm_all_reduce_y", CommFlow::NormReduce, &y);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ffn_block(
    rb: &mut ReportBuilder<'_>,
    model: &ModelConfig,
    tokens: f64,
    intermediate: u64,
    ax_f1: Axis,
    ax_f2: Axis,
    device: &DeviceConfig,
    tag: &str,
) -> Result<(), DeviceError> {
    let e = model.bytes_per_elem;
    let m = device.mesh.side as f64;
    let interm_dev = (intermediate / device.tp_degree as u64).max(1);
    let b = tokens.ceil().max(1.0) as u64;
    let bottom_fcs = match model.ffn {
        FfnKind::Dense => 1u64,
        FfnKind::Glu => 2,
    };
    for i in 0..bottom_fcs {
        rb.compute(
            &format!("{tag}_f1{}", if bottom_fcs > 1 { ["a", "b"][i as usize] } else { "" }),
            fc_latency(b, model.hidden, interm_dev, device, e)?,
        );
    }
    rb.comm(
        &format!("{tag}_f1_all_reduce"),
        CommFlow::FcAllReduce,
        &collectives::all_reduce_1d(
            ax_f1,
            (b * bottom_fcs * interm_dev * e) as f64 / m,
            &device.mesh,
        )?,
    );
    // Activation (and the GLU elementwise product) run in place.
    rb.compute(
        &format!("{tag}_activation"),
        OpCost {
            cycles: b as f64 * interm_dev as f64 / device.vector_lanes,
            flops: b as f64 * interm_dev as f64,
            dram_bytes: 0.0,
            sram_bytes: (b * bottom_fcs * interm_dev * e) as f64,
        },
    );
    rb.compute(&format!("{tag}_f2"), fc_latency(b, interm_dev, model.hidden, device, e)?);
    rb.comm(
        &format!("{tag}_f2_all_reduce"),
        CommFlow::FcAllReduce,
        &collectives::all_reduce_1d(ax_f2, (b * model.hidden * e) as f64 / m, &device.mesh)?,
    );
    Ok(())
}

fn effective_loads(moe_loads: &[f64], model: &ModelConfig, batch: u64) -> Vec<f64> {
    if !moe_loads.is_empty() {
        return moe_loads.to_vec();
    }
    // Uniform expectation when the caller supplied no samples.
    let per = batch as f64 * model.top_k as f64 / model.experts.max(1) as f64;
    vec![per; model.experts as usize]
}

// ---------------------------------------------------------------------------
// Parametric sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GranularityRow {
    pub model: String,
    pub side: usize,
    pub total_cycles: f64,
    pub compute_cycles: f64,
    pub intra_comm_cycles: f64,
    pub normalized_latency: f64,
}

/// Effective per-bank bandwidth penalty: linear in log2 of banks-per-PE
/// (calibration knob). One bank per PE is the unpenalized reference.
pub fn bank_underutilization_factor(banks_per_pe: u32, slope: f64) -> f64 {
    (1.0 - slope * (banks_per_pe as f64).log2()).max(0.1)
}

/// PE-granularity sweep: rescale per-PE compute and bandwidth over array
/// sizes keeping device totals fixed, apply the bank-underutilization
/// penalty, and report normalized decode latency per model.
pub fn sweep_pe_granularity(
    models: &[ModelConfig],
    sides: &[usize],
    base: &DeviceConfig,
    batch: u64,
    ctx_tokens: u64,
    penalty_slope: f64,
) -> Result<Vec<GranularityRow>, DeviceError> {
    let total_mac = base.mac_flops_per_cycle * base.pe_count() as f64;
    let total_bw = base.dram_bytes_per_cycle * base.pe_count() as f64;
    let grid_side = (base.total_banks as f64).sqrt() as usize;
    let mut rows = Vec::new();
    for model in models {
        let mut model_rows = Vec::new();
        for &side in sides {
            if grid_side % side != 0 {
                return Err(DeviceError::BadConfig(format!(
                    "side {side} does not divide the {grid_side}x{grid_side} bank grid"
                )));
            }
            let pes = side * side;
            let banks_per_pe = base.total_banks / pes as u32;
            let mut dev = *base;
            dev.mesh.side = side;
            dev.banks_per_pe = banks_per_pe;
            dev.mac_flops_per_cycle = total_mac / pes as f64;
            dev.dram_bytes_per_cycle =
                total_bw / pes as f64 * bank_underutilization_factor(banks_per_pe, penalty_slope);
            let placement = BatchPlacement::uniform(batch as usize, ctx_tokens, &dev.mesh);
            let report = decode_iteration_latency(model, &placement, &[], &dev)?;
            model_rows.push(GranularityRow {
                model: model.name.clone(),
                side,
                total_cycles: report.total_cycles(),
                compute_cycles: report.cycles_of(LatencyKind::PeCompute),
                intra_comm_cycles: report.cycles_of(LatencyKind::IntraDeviceComm),
                normalized_latency: 0.0,
            });
        }
        let best = model_rows.iter().map(|r| r.total_cycles).fold(f64::MAX, f64::min);
        for mut r in model_rows {
            r.normalized_latency = r.total_cycles / best;
            rows.push(r);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_model() -> ModelConfig {
        ModelConfig {
            name: "desk".into(),
            layers: 2,
            hidden: 2048,
            intermediate: 2048,
            q_heads: 16,
            kv_heads: 2,
            head_dim: 64,
            attention: AttentionKind::Gqa,
            mla: None,
            ffn: FfnKind::Dense,
            experts: 0,
            top_k: 0,
            norm: NormKind::RmsNorm,
            bytes_per_elem: 2,
        }
    }

    #[test]
    fn fc_memory_bound_equals_weight_stream_time() {
        // batch 1, small activations: cycles ~ (weights+acts)/bw.
        let dev = DeviceConfig::full_scale();
        let cost = fc_latency(1, 4096, 4096, &dev, 2).unwrap();
        let tile = 1024.0 * 1024.0 * 2.0;
        let acts = 1.0 * (1024.0 + 1024.0) * 2.0;
        assert!((cost.cycles - (tile + acts) / dev.dram_bytes_per_cycle).abs() < 1e-6);
    }

    #[test]
    fn fc_compute_bound_at_huge_batch() {
        let dev = DeviceConfig::full_scale();
        let b = 65536;
        let cost = fc_latency(b, 1024, 1024, &dev, 2).unwrap();
        let flops = 2.0 * b as f64 * 256.0 * 256.0;
        assert!((cost.cycles - flops / dev.mac_flops_per_cycle).abs() / cost.cycles < 1e-9);
    }

    #[test]
    fn fc_roofline_crossover_batch() {
        // Solve the roofline equality by bisection and check both legs meet.
        let dev = DeviceConfig::full_scale();
        let (h_in, h_out, e) = (4096u64, 4096u64, 2u64);
        let tile = 1024.0f64;
        let legs = |b: f64| {
            let flops = 2.0 * b * tile * tile / dev.mac_flops_per_cycle;
            let bytes = (tile * tile * 2.0 + b * (tile + tile) * 2.0) / dev.dram_bytes_per_cycle;
            (flops, bytes)
        };
        let (mut lo, mut hi) = (1.0f64, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (c, m) = legs(mid);
            if c < m {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b_star = lo.round().max(1.0) as u64;
        let cost = fc_latency(b_star, h_in, h_out, &dev, e).unwrap();
        let (c, m) = legs(b_star as f64);
        assert!((cost.cycles - c.max(m)).abs() / cost.cycles < 1e-9);
        assert!((c - m).abs() / m < 0.05, "legs should nearly meet at crossover");
    }

    #[test]
    fn fc_rejects_impossible_tile() {
        let mut dev = DeviceConfig::full_scale();
        dev.compute_buffer_bytes = 64.0;
        assert_eq!(
            fc_latency(1024, 65536, 65536, &dev, 2).unwrap_err(),
            DeviceError::TileTooLarge
        );
    }

    #[test]
    fn roofline_sandwich() {
        let dev = DeviceConfig::desk_scale();
        for (b, hi, ho) in [(1u64, 512u64, 512u64), (16, 2048, 512), (64, 768, 3072)] {
            let cost = fc_latency(b, hi, ho, &dev, 2).unwrap();
            let pes = dev.pe_count() as f64;
            let compute_only = cost.flops / pes / dev.mac_flops_per_cycle;
            let memory_only = cost.dram_bytes / pes / dev.dram_bytes_per_cycle;
            assert!(cost.cycles >= compute_only.max(memory_only) - 1e-9);
            assert!(cost.cycles <= compute_only + memory_only + 1e-9);
        }
    }

    #[test]
    fn scale_coherence() {
        let model = desk_model();
        let dev = DeviceConfig::desk_scale();
        let placement = BatchPlacement::uniform(8, 256, &dev.mesh);
        let base = decode_iteration_latency(&model, &placement, &[], &dev).unwrap();
        let mut fast = dev;
        fast.dram_bytes_per_cycle *= 2.0;
        let faster = decode_iteration_latency(&model, &placement, &[], &fast).unwrap();
        assert!(faster.total_cycles() <= base.total_cycles() + 1e-9);
        let mut brawny = dev;
        brawny.mac_flops_per_cycle *= 2.0;
        let b = decode_iteration_latency(&model, &placement, &[], &brawny).unwrap();
        assert!(b.total_cycles() <= base.total_cycles() + 1e-9);
    }

    #[test]
    fn attention_single_pe_concentration() {
        let dev = DeviceConfig::desk_scale();
        let mut tokens = vec![0.0; dev.pe_count()];
        tokens[3] = 4096.0;
        let attn = attention_latency(&tokens, 512.0, 256.0, 16.0, 32768.0, &dev);
        let device_latency = attn.per_pe_cycles.iter().cloned().fold(0.0, f64::max);
        assert!((device_latency - attn.per_pe_cycles[3]).abs() < 1e-9);
        assert!((imbalance_ratio(&attn.per_pe_cycles) - 1.0).abs() < 1e-12);
        let even = attention_latency(&vec![256.0; dev.pe_count()], 512.0, 256.0, 16.0, 32768.0, &dev);
        assert_eq!(imbalance_ratio(&even.per_pe_cycles), 0.0);
    }

    #[test]
    fn attention_matches_per_pe_recompute() {
        let dev = DeviceConfig::desk_scale();
        let tokens = [100.0, 35.0, 0.0, 700.0];
        let kv = 512.0;
        let fl = 4096.0;
        let ve = 64.0;
        let attn = attention_latency(&tokens, kv, fl, ve, kv * 64.0, &dev);
        for (i, &t) in tokens.iter().enumerate() {
            if t == 0.0 {
                assert_eq!(attn.per_pe_cycles[i], 0.0);
                continue;
            }
            let eff = dev.dram_bytes_per_cycle * dev.kv_read_efficiency(kv * 64.0);
            let gemm = (t * kv / eff).max(t * fl / dev.mac_flops_per_cycle);
            let vec_t = t * ve / dev.vector_lanes;
            let macro_tokens = ((dev.compute_buffer_bytes / 2.0) / kv).floor().max(1.0);
            let groups = 2.0 * (t / macro_tokens).ceil();
            let expect =
                gemm + (groups - 1.0) * (vec_t / groups - gemm / groups).max(0.0) + vec_t / groups;
            assert!((attn.per_pe_cycles[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn placement_monotonicity() {
        let dev = DeviceConfig::desk_scale();
        let mut tokens = vec![100.0; dev.pe_count()];
        tokens[0] = 900.0;
        tokens[5] = 20.0;
        let before = attention_latency(&tokens, 512.0, 256.0, 16.0, 32768.0, &dev);
        let max_before = before.per_pe_cycles.iter().cloned().fold(0.0, f64::max);
        // Move one block (64 tokens) from the most to the least loaded PE.
        tokens[0] -= 64.0;
        tokens[5] += 64.0;
        let after = attention_latency(&tokens, 512.0, 256.0, 16.0, 32768.0, &dev);
        let max_after = after.per_pe_cycles.iter().cloned().fold(0.0, f64::max);
        assert!(max_after <= max_before + 1e-9);
    }

    #[test]
    fn report_additivity_and_fractions() {
        let model = desk_model();
        let dev = DeviceConfig::desk_scale();
        let placement = BatchPlacement::uniform(4, 128, &dev.mesh);
        let report = decode_iteration_latency(&model, &placement, &[], &dev).unwrap();
        let sum = report.cycles_of(LatencyKind::PeCompute)
            + report.cycles_of(LatencyKind::IntraDeviceComm)
            + report.cycles_of(LatencyKind::InterDeviceComm);
        assert!((report.total_cycles() - sum).abs() < 1e-9);
        let frac = report.x_traffic_fraction();
        assert!((0.0..=1.0).contains(&frac));
        // tp = 1: no inter-device term.
        assert_eq!(report.cycles_of(LatencyKind::InterDeviceComm), 0.0);
        // All five flows appear.
        assert_eq!(report.comm_cycles.len(), 5);
    }

    #[test]
    fn energy_linearity_and_zero() {
        let zero = energy_estimate(&EnergyCounters::default(), &EnergyCoeffs::default());
        assert_eq!(zero.total_j(), 0.0);
        let c = EnergyCounters {
            flops: 1e9,
            dram_bytes: 1e6,
            sram_bytes: 5e5,
            noc_bytes: 1e5,
            link_bytes: 2e5,
        };
        let e1 = energy_estimate(&c, &EnergyCoeffs::default());
        let doubled = EnergyCounters {
            flops: 2.0 * c.flops,
            dram_bytes: 2.0 * c.dram_bytes,
            sram_bytes: 2.0 * c.sram_bytes,
            noc_bytes: 2.0 * c.noc_bytes,
            link_bytes: 2.0 * c.link_bytes,
        };
        let e2 = energy_estimate(&doubled, &EnergyCoeffs::default());
        assert!((e2.total_j() - 2.0 * e1.total_j()).abs() < 1e-18);
        // Hand check of the FLOP term: 1e9 FLOP × 0.43 pJ = 0.43 mJ.
        assert!((e1.flop_j - 0.43e-3).abs() < 1e-12);
    }

    #[test]
    fn hand_composed_single_layer_chain() {
        // 1 layer, 1 request, MHA, tiny dims: total equals the sum of the
        // chain composed by hand from the same primitives.
        let model = ModelConfig {
            name: "tiny".into(),
            layers: 1,
            hidden: 64,
            intermediate: 128,
            q_heads: 2,
            kv_heads: 2,
            head_dim: 16,
            attention: AttentionKind::Mha,
            mla: None,
            ffn: FfnKind::Dense,
            experts: 0,
            top_k: 0,
            norm: NormKind::LayerNorm,
            bytes_per_elem: 2,
        };
        let dev = DeviceConfig::desk_scale();
        let placement = BatchPlacement {
            per_pe_tokens: {
                let mut v = vec![0.0; 16];
                v[5] = 40.0;
                v
            },
            targets: vec![(0, Pe::new(1, 1))],
            kv_block_tokens: 64,
        };
        let report = decode_iteration_latency(&model, &placement, &[], &dev).unwrap();

        let e = 2u64;
        let q_dim = 2 * 16u64;
        let mesh = &dev.mesh;
        let mut expect = 0.0;
        expect += fc_latency(1, 64, (2 + 4) * 16, &dev, e).unwrap().cycles;
        expect += collectives::cost_of_schedule(
            &collectives::query_replication((q_dim * e) as f64, mesh).unwrap(),
            mesh,
        );
        expect += collectives::cost_of_schedule(
            &collectives::kv_vector_delivery(&placement.targets, (2 * 2 * 16 * e) as f64, mesh)
                .unwrap(),
            mesh,
        );
        let kv_tok = (2 * 2 * 16 * e) as f64;
        expect += attention_latency(
            &placement.per_pe_tokens,
            kv_tok,
            2.0 * 4.0 * 16.0,
            2.0 * VEC_OPS_PER_SCORE,
            kv_tok * 64.0,
            &dev,
        )
        .cost
        .cycles;
        expect += collectives::cost_of_schedule(
            &collectives::attn_output_reduction((q_dim * e) as f64, mesh).unwrap(),
            mesh,
        );
        expect += fc_latency(1, q_dim, 64, &dev, e).unwrap().cycles;
        expect += collectives::cost_of_schedule(
            &collectives::all_reduce_1d(Axis::X, (64 * e) as f64 / 4.0, mesh).unwrap(),
            mesh,
        );
        // Two norm merges (X+Y each) with 2 scalars for LayerNorm.
        let norm = collectives::cost_of_schedule(
            &collectives::all_reduce_1d(Axis::X, (2 * e) as f64, mesh).unwrap(),
            mesh,
        ) + collectives::cost_of_schedule(
            &collectives::all_reduce_1d(Axis::Y, (2 * e) as f64, mesh).unwrap(),
            mesh,
        );
        expect += 2.0 * norm;
        expect += fc_latency(1, 64, 128, &dev, e).unwrap().cycles;
        expect += collectives::cost_of_schedule(
            &collectives::all_reduce_1d(Axis::X, (128 * e) as f64 / 4.0, mesh).unwrap(),
            mesh,
        );
        expect += 1.0 * 128.0 / dev.vector_lanes; // activation
        expect += fc_latency(1, 128, 64, &dev, e).unwrap().cycles;
        expect += collectives::cost_of_schedule(
            &collectives::all_reduce_1d(Axis::Y, (64 * e) as f64 / 4.0, mesh).unwrap(),
            mesh,
        );
        assert!(
            (report.total_cycles() - expect).abs() < 1e-6,
            "report {} vs hand {expect}",
            report.total_cycles()
        );
    }

    #[test]
    fn llama3_tp8_gets_one_kv_head() {
        let model = ModelConfig {
            name: "llama3-70b".into(),
            layers: 80,
            hidden: 8192,
            intermediate: 28672,
            q_heads: 64,
            kv_heads: 8,
            head_dim: 128,
            attention: AttentionKind::Gqa,
            mla: None,
            ffn: FfnKind::Glu,
            experts: 0,
            top_k: 0,
            norm: NormKind::RmsNorm,
            bytes_per_elem: 2,
        };
        model.validate().unwrap();
        assert_eq!(model.kv_heads_per_device(8), 1);
        assert_eq!(model.q_heads_per_device(8), 8);
    }

    #[test]
    fn inter_device_zero_at_tp1() {
        let model = desk_model();
        let mut dev = DeviceConfig::desk_scale();
        dev.tp_degree = 1;
        let placement = BatchPlacement::uniform(2, 64, &dev.mesh);
        let r = decode_iteration_latency(&model, &placement, &[], &dev).unwrap();
        assert_eq!(r.cycles_of(LatencyKind::InterDeviceComm), 0.0);
        dev.tp_degree = 8;
        let r8 = decode_iteration_latency(&model, &placement, &[], &dev).unwrap();
        assert!(r8.cycles_of(LatencyKind::InterDeviceComm) > 0.0);
    }

    #[test]
    fn granularity_sweep_shape() {
        let base = DeviceConfig::desk_scale();
        let rows =
            sweep_pe_granularity(&[desk_model()], &[1, 2, 4, 8, 16], &base, 8, 512, 0.06).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().any(|r| r.side == 4));
        let one = rows.iter().find(|r| r.side == 1).unwrap();
        assert_eq!(one.intra_comm_cycles, 0.0);
        // NoC term grows with array size.
        let comm: Vec<f64> = rows.iter().map(|r| r.intra_comm_cycles).collect();
        for w in comm.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(rows.iter().any(|r| (r.normalized_latency - 1.0).abs() < 1e-12));
    }

    #[test]
    fn expert_loads_sampling() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loads = sample_expert_loads(8, 2, 100, &[], &mut rng);
        assert_eq!(loads.iter().sum::<f64>(), 200.0);
        assert!(loads.iter().all(|&l| l > 0.0));
        let skew = sample_expert_loads(4, 1, 1000, &[0.97, 0.01, 0.01, 0.01], &mut rng);
        assert!(skew[0] > 800.0);
    }
}
