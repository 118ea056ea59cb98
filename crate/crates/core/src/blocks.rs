//! Blockwise KV cache tables and the spatially-aware block allocator, plus
//! the coarse full-length-static baseline policy and the fragmentation /
//! load-balance metrics.
//!
//! The allocator keeps per-PE load state (resident tokens, last-block count,
//! distance to the nearest central PE, and per-axis scatter-path volume) and
//! places each full block on the PE minimal under the full-block comparator
//! and each last block on the PE minimal under the last-block comparator.
//! Selection uses tournament trees so one placement costs O(log P)
//! comparator evaluations per tree; every selection is argmin-equivalent to
//! a linear scan under the same comparator.

use crate::mesh::{central_indices, Pe};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

pub type RequestId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("out of capacity: need {needed} blocks, {free} free")]
    OutOfCapacity { needed: u64, free: u64 },
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("request {0} already has an allocation")]
    DuplicateRequest(RequestId),
    #[error("request size must be >= 1 token")]
    EmptyRequest,
}

/// Per-PE allocator bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeState {
    pub coord: Pe,
    /// Linear row-major index; the final comparator tie-break.
    pub index: usize,
    /// Total resident tokens.
    pub tokens: u64,
    /// Number of requests whose last block lives here.
    pub last_blocks: u32,
    /// Manhattan distance to the nearest central PE.
    pub center_distance: u32,
    /// Accumulated last-block volume on this PE's X-axis scatter paths
    /// (stored in per-token units, scaled by the mesh side so entries stay
    /// integral).
    pub path_load_x: u64,
    /// Accumulated last-block volume on this PE's Y-axis scatter paths.
    pub path_load_y: u64,
    pub free_blocks: u32,
    pub capacity_blocks: u32,
}

/// Full-block comparator: fewer tokens first; ties prefer the PE farther
/// from the center; remaining ties go to the lowest index.
pub fn cmp_full(a: &PeState, b: &PeState) -> Ordering {
    a.tokens
        .cmp(&b.tokens)
        .then(b.center_distance.cmp(&a.center_distance))
        .then(a.index.cmp(&b.index))
}

/// Last-block comparator: fewer tokens, then nearer the center, then fewer
/// last blocks, then lighter X path load, then lighter Y path load, then
/// lowest index.
pub fn cmp_last(a: &PeState, b: &PeState) -> Ordering {
    a.tokens
        .cmp(&b.tokens)
        .then(a.center_distance.cmp(&b.center_distance))
        .then(a.last_blocks.cmp(&b.last_blocks))
        .then(a.path_load_x.cmp(&b.path_load_x))
        .then(a.path_load_y.cmp(&b.path_load_y))
        .then(a.index.cmp(&b.index))
}

/// Address of slot `j` of block `i` given the PE-local base address, block
/// size `b`, and KV vector length `h`.
pub fn slot_address(base: u64, block: u64, slot: u64, b: u64, h: u64) -> u64 {
    base + (block * b + slot) * h
}

/// Normalized usage disparity: (max - min) used, over per-PE capacity.
pub fn fragmentation_ratio(per_pe_used: &[f64], per_pe_capacity: f64) -> f64 {
    if per_pe_used.is_empty() || per_pe_capacity <= 0.0 {
        return 0.0;
    }
    let max = per_pe_used.iter().cloned().fold(f64::MIN, f64::max);
    let min = per_pe_used.iter().cloned().fold(f64::MAX, f64::min);
    (max - min) / per_pe_capacity
}

/// Attention load imbalance: the max-min latency gap over the iteration's
/// total attention latency (its slowest PE).
pub fn imbalance_ratio(per_pe_latency: &[f64]) -> f64 {
    let max = per_pe_latency.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let min = per_pe_latency.iter().cloned().fold(f64::MAX, f64::min);
    (max - min) / max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct PlacedBlock {
    /// Linear PE index.
    pub pe: usize,
    /// PE-local block id.
    pub block: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum BlockKind {
    Full,
    Last,
}

/// One request's cache: ordered block list and the token count of the
/// trailing block (1..=b; earlier blocks are always full).
#[derive(Debug, Clone)]
pub struct RequestCache {
    pub id: RequestId,
    pub blocks: Vec<PlacedBlock>,
    pub last_tokens: u32,
}

/// Audit record of one placement decision: the chosen PE's comparator keys
/// as they were when the decision was made.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AllocTraceRow {
    pub step: u64,
    pub request: RequestId,
    pub kind: BlockKind,
    pub block: u32,
    pub pe_x: u8,
    pub pe_y: u8,
    pub tokens: u64,
    pub center_distance: u32,
    pub last_blocks: u32,
    pub path_load_x: u64,
    pub path_load_y: u64,
}

/// Tournament (argmin) tree over PE indices. `update` recomputes the path
/// from one leaf to the root: exactly `depth` comparator evaluations.
struct ArgminTree {
    leaves: usize,
    size: usize,
    tree: Vec<usize>,
}

impl ArgminTree {
    fn new(leaves: usize) -> Self {
        let size = leaves.next_power_of_two().max(1);
        Self { leaves, size, tree: vec![usize::MAX; 2 * size] }
    }

    fn depth(&self) -> u32 {
        self.size.trailing_zeros()
    }

    fn rebuild(&mut self, mut cmp: impl FnMut(usize, usize) -> Ordering) {
        for i in 0..self.size {
            self.tree[self.size + i] = if i < self.leaves { i } else { usize::MAX };
        }
        for n in (1..self.size).rev() {
            self.tree[n] = self.pick(self.tree[2 * n], self.tree[2 * n + 1], &mut cmp);
        }
    }

    fn pick(
        &self,
        a: usize,
        b: usize,
        cmp: &mut impl FnMut(usize, usize) -> Ordering,
    ) -> usize {
        match (a, b) {
            (usize::MAX, _) => b,
            (_, usize::MAX) => a,
            _ => match cmp(a, b) {
                Ordering::Greater => b,
                _ => a,
            },
        }
    }

    fn update(&mut self, leaf: usize, mut cmp: impl FnMut(usize, usize) -> Ordering) {
        let mut n = (self.size + leaf) / 2;
        while n >= 1 {
            self.tree[n] = self.pick(self.tree[2 * n], self.tree[2 * n + 1], &mut cmp);
            n /= 2;
        }
    }

    fn winner(&self) -> usize {
        self.tree[1]
    }
}

/// Central block tables: free block-id lists per PE and each request's block
/// list. Every block id lives in exactly one list.
#[derive(Debug, Clone)]
pub struct BlockTables {
    /// Tokens per block (b).
    pub block_size: u32,
    /// KV vector length per token (H), also the path-load volume unit.
    pub kv_len: u64,
    /// Max blocks per PE (M).
    pub blocks_per_pe: u32,
    /// Per-PE free block ids, sorted descending so pop() yields the lowest.
    available: Vec<Vec<u32>>,
    requests: BTreeMap<RequestId, RequestCache>,
    base_addresses: Vec<u64>,
}

impl BlockTables {
    pub fn new(pe_count: usize, blocks_per_pe: u32, block_size: u32, kv_len: u64) -> Self {
        let available =
            (0..pe_count).map(|_| (0..blocks_per_pe).rev().collect::<Vec<u32>>()).collect();
        let span = blocks_per_pe as u64 * block_size as u64 * kv_len;
        Self {
            block_size,
            kv_len,
            blocks_per_pe,
            available,
            requests: BTreeMap::new(),
            base_addresses: (0..pe_count as u64).map(|i| i * span).collect(),
        }
    }

    fn take_block(&mut self, pe: usize) -> Option<u32> {
        self.available[pe].pop()
    }

    fn return_block(&mut self, pe: usize, block: u32) {
        let list = &mut self.available[pe];
        let pos = list.partition_point(|&x| x > block);
        list.insert(pos, block);
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestCache> {
        self.requests.get(&id)
    }

    pub fn request_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.requests.keys().copied()
    }

    pub fn base_address(&self, pe: usize) -> u64 {
        self.base_addresses[pe]
    }

    /// Address of slot `slot` of the request's `block_idx`-th block.
    pub fn slot_address_of(&self, id: RequestId, block_idx: usize, slot: u64) -> Option<u64> {
        let cache = self.requests.get(&id)?;
        let placed = cache.blocks.get(block_idx)?;
        Some(slot_address(
            self.base_addresses[placed.pe],
            placed.block as u64,
            slot,
            self.block_size as u64,
            self.kv_len,
        ))
    }

    /// Exclusivity check: every block id appears in exactly one list.
    pub fn validate_exclusive(&self) -> Result<(), String> {
        let pe_count = self.available.len();
        let mut seen = vec![vec![false; self.blocks_per_pe as usize]; pe_count];
        for (pe, list) in self.available.iter().enumerate() {
            for &b in list {
                if seen[pe][b as usize] {
                    return Err(format!("block {b} on PE {pe} listed twice as available"));
                }
                seen[pe][b as usize] = true;
            }
        }
        for cache in self.requests.values() {
            for placed in &cache.blocks {
                if seen[placed.pe][placed.block as usize] {
                    return Err(format!(
                        "block {} on PE {} in request {} also listed elsewhere",
                        placed.block, placed.pe, cache.id
                    ));
                }
                seen[placed.pe][placed.block as usize] = true;
            }
        }
        for (pe, flags) in seen.iter().enumerate() {
            if let Some(b) = flags.iter().position(|f| !f) {
                return Err(format!("block {b} on PE {pe} is in no list"));
            }
        }
        Ok(())
    }
}

/// Result of one growth step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    /// The token joined the existing partially-filled last block.
    ReusedLast,
    /// A fresh block was allocated and became the last block.
    NewBlock(PlacedBlock),
}

/// The spatially-aware block allocator.
pub struct SpatialAllocator {
    side: usize,
    centrals: Vec<u8>,
    pub tables: BlockTables,
    pe_states: Vec<PeState>,
    full_tree: ArgminTree,
    last_tree: ArgminTree,
    comparator_evals: u64,
    step: u64,
    trace: Option<Vec<AllocTraceRow>>,
}

impl SpatialAllocator {
    pub fn new(side: usize, blocks_per_pe: u32, block_size: u32, kv_len: u64) -> Self {
        let pe_count = side * side;
        let centrals = central_indices(side);
        let central_pes: Vec<Pe> = centrals
            .iter()
            .flat_map(|&x| centrals.iter().map(move |&y| Pe::new(x, y)))
            .collect();
        let pe_states: Vec<PeState> = (0..pe_count)
            .map(|i| {
                let coord = Pe::from_index(i, side);
                PeState {
                    coord,
                    index: i,
                    tokens: 0,
                    last_blocks: 0,
                    center_distance: central_pes
                        .iter()
                        .map(|c| coord.manhattan(c))
                        .min()
                        .unwrap_or(0),
                    path_load_x: 0,
                    path_load_y: 0,
                    free_blocks: blocks_per_pe,
                    capacity_blocks: blocks_per_pe,
                }
            })
            .collect();
        let mut alloc = Self {
            side,
            centrals,
            tables: BlockTables::new(pe_count, blocks_per_pe, block_size, kv_len),
            pe_states,
            full_tree: ArgminTree::new(pe_count),
            last_tree: ArgminTree::new(pe_count),
            comparator_evals: 0,
            step: 0,
            trace: None,
        };
        alloc.rebuild_trees();
        alloc
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<AllocTraceRow> {
        self.trace.take().unwrap_or_default()
    }

    pub fn pe_states(&self) -> &[PeState] {
        &self.pe_states
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn block_size(&self) -> u32 {
        self.tables.block_size
    }

    pub fn free_blocks_total(&self) -> u64 {
        self.pe_states.iter().map(|p| p.free_blocks as u64).sum()
    }

    pub fn blocks_needed(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.tables.block_size as u64)
    }

    /// Comparator evaluations performed so far by the priority structure.
    pub fn comparator_evals(&self) -> u64 {
        self.comparator_evals
    }

    /// Comparator evaluations one leaf update costs in one tree.
    pub fn tree_depth(&self) -> u32 {
        self.full_tree.depth()
    }

    /// Token load per PE.
    pub fn per_pe_tokens(&self) -> Vec<u64> {
        self.pe_states.iter().map(|p| p.tokens).collect()
    }

    /// Fragmentation ratio over token usage, normalized to per-PE capacity.
    pub fn fragmentation(&self) -> f64 {
        let used: Vec<f64> = self.pe_states.iter().map(|p| p.tokens as f64).collect();
        let cap = self.tables.blocks_per_pe as f64 * self.tables.block_size as f64;
        fragmentation_ratio(&used, cap)
    }

    /// The PE currently holding the request's last block.
    pub fn last_block_pe(&self, id: RequestId) -> Option<Pe> {
        let cache = self.tables.requests.get(&id)?;
        cache.blocks.last().map(|p| Pe::from_index(p.pe, self.side))
    }

    fn rebuild_trees(&mut self) {
        let states = &self.pe_states;
        let evals = &mut self.comparator_evals;
        self.full_tree.rebuild(|a, b| {
            *evals += 1;
            eligible_cmp(states, a, b, cmp_full)
        });
        self.last_tree.rebuild(|a, b| {
            *evals += 1;
            eligible_cmp(states, a, b, cmp_last)
        });
    }

    fn update_trees(&mut self, leaf: usize) {
        let states = &self.pe_states;
        let evals = &mut self.comparator_evals;
        self.full_tree.update(leaf, |a, b| {
            *evals += 1;
            eligible_cmp(states, a, b, cmp_full)
        });
        self.last_tree.update(leaf, |a, b| {
            *evals += 1;
            eligible_cmp(states, a, b, cmp_last)
        });
    }

    fn record(&mut self, req: RequestId, kind: BlockKind, pe: usize, block: u32) {
        self.step += 1;
        if let Some(rows) = &mut self.trace {
            let s = &self.pe_states[pe];
            rows.push(AllocTraceRow {
                step: self.step,
                request: req,
                kind,
                block,
                pe_x: s.coord.x,
                pe_y: s.coord.y,
                tokens: s.tokens,
                center_distance: s.center_distance,
                last_blocks: s.last_blocks,
                path_load_x: s.path_load_x,
                path_load_y: s.path_load_y,
            });
        }
    }

    /// X/Y scatter-path PEs for a delivery target, endpoints included.
    fn scatter_paths(&self, target: Pe) -> (Vec<usize>, Vec<usize>) {
        let root_x = nearest_of(&self.centrals, target.x);
        let root_y = nearest_of(&self.centrals, target.y);
        let mut xs = Vec::new();
        if root_x != target.x {
            let (lo, hi) = (root_x.min(target.x), root_x.max(target.x));
            for x in lo..=hi {
                for y in 0..self.side as u8 {
                    xs.push(Pe::new(x, y).index(self.side));
                }
            }
        }
        let mut ys = Vec::new();
        if root_y != target.y {
            let (lo, hi) = (root_y.min(target.y), root_y.max(target.y));
            for y in lo..=hi {
                ys.push(Pe::new(target.x, y).index(self.side));
            }
        }
        (xs, ys)
    }

    fn apply_path_load(&mut self, target: Pe, sign: i64) {
        let unit = self.tables.kv_len as i64 * sign;
        let (xs, ys) = self.scatter_paths(target);
        for pe in xs {
            let s = &mut self.pe_states[pe];
            s.path_load_x = (s.path_load_x as i64 + unit) as u64;
            self.update_trees(pe);
        }
        for pe in ys {
            let s = &mut self.pe_states[pe];
            s.path_load_y = (s.path_load_y as i64 + unit) as u64;
            self.update_trees(pe);
        }
    }

    fn place_block(
        &mut self,
        req: RequestId,
        kind: BlockKind,
        tokens: u32,
    ) -> Result<PlacedBlock, AllocError> {
        let winner = match kind {
            BlockKind::Full => self.full_tree.winner(),
            BlockKind::Last => self.last_tree.winner(),
        };
        debug_assert!(winner != usize::MAX);
        let block = self
            .tables
            .take_block(winner)
            .expect("winner must have a free block");
        self.record(req, kind, winner, block);
        let state = &mut self.pe_states[winner];
        state.tokens += tokens as u64;
        state.free_blocks -= 1;
        if kind == BlockKind::Last {
            state.last_blocks += 1;
        }
        self.update_trees(winner);
        Ok(PlacedBlock { pe: winner, block })
    }

    /// Allocate a request of `tokens` total tokens (its prompt length for a
    /// new arrival). Full blocks go to the full-block comparator's argmin,
    /// re-evaluated after every placement; the trailing block goes to the
    /// last-block comparator's argmin.
    pub fn allocate(&mut self, req: RequestId, tokens: u64) -> Result<Vec<PlacedBlock>, AllocError> {
        if tokens == 0 {
            return Err(AllocError::EmptyRequest);
        }
        if self.tables.requests.contains_key(&req) {
            return Err(AllocError::DuplicateRequest(req));
        }
        let b = self.tables.block_size as u64;
        let last_tokens = ((tokens - 1) % b + 1) as u32;
        let full_blocks = (tokens - last_tokens as u64) / b;
        let needed = full_blocks + 1;
        let free = self.free_blocks_total();
        if needed > free {
            return Err(AllocError::OutOfCapacity { needed, free });
        }
        let mut blocks = Vec::with_capacity(needed as usize);
        for _ in 0..full_blocks {
            blocks.push(self.place_block(req, BlockKind::Full, self.tables.block_size)?);
        }
        let last = self.place_block(req, BlockKind::Last, last_tokens)?;
        let target = Pe::from_index(last.pe, self.side);
        self.apply_path_load(target, 1);
        blocks.push(last);
        self.tables
            .requests
            .insert(req, RequestCache { id: req, blocks: blocks.clone(), last_tokens });
        Ok(blocks)
    }

    /// Append one decode token: reuse the partially-filled last block, or
    /// allocate a fresh block that becomes the new last block.
    pub fn grow(&mut self, req: RequestId) -> Result<Growth, AllocError> {
        let cache =
            self.tables.requests.get(&req).ok_or(AllocError::UnknownRequest(req))?;
        let b = self.tables.block_size;
        if cache.last_tokens < b {
            let pe = cache.blocks.last().expect("cache has blocks").pe;
            self.tables.requests.get_mut(&req).unwrap().last_tokens += 1;
            self.pe_states[pe].tokens += 1;
            self.update_trees(pe);
            return Ok(Growth::ReusedLast);
        }
        if self.free_blocks_total() == 0 {
            return Err(AllocError::OutOfCapacity { needed: 1, free: 0 });
        }
        // The filled block stops being the delivery target.
        let old_pe = cache.blocks.last().expect("cache has blocks").pe;
        let old_target = Pe::from_index(old_pe, self.side);
        self.pe_states[old_pe].last_blocks -= 1;
        self.update_trees(old_pe);
        self.apply_path_load(old_target, -1);
        let placed = self.place_block(req, BlockKind::Last, 1)?;
        let target = Pe::from_index(placed.pe, self.side);
        self.apply_path_load(target, 1);
        let cache = self.tables.requests.get_mut(&req).unwrap();
        cache.blocks.push(placed);
        cache.last_tokens = 1;
        Ok(Growth::NewBlock(placed))
    }

    /// Release all of a request's blocks back to the available lists and
    /// restore the per-PE state. Returns the released block count.
    pub fn free(&mut self, req: RequestId) -> Result<usize, AllocError> {
        let cache =
            self.tables.requests.remove(&req).ok_or(AllocError::UnknownRequest(req))?;
        let count = cache.blocks.len();
        let b = self.tables.block_size;
        let last_idx = count - 1;
        for (i, placed) in cache.blocks.iter().enumerate() {
            let tokens = if i == last_idx { cache.last_tokens } else { b };
            let state = &mut self.pe_states[placed.pe];
            state.tokens -= tokens as u64;
            state.free_blocks += 1;
            if i == last_idx {
                state.last_blocks -= 1;
            }
            self.tables.return_block(placed.pe, placed.block);
            self.update_trees(placed.pe);
        }
        let target = Pe::from_index(cache.blocks[last_idx].pe, self.side);
        self.apply_path_load(target, -1);
        Ok(count)
    }

    /// Per-PE resident tokens of one request (for attention placement).
    pub fn request_tokens_per_pe(&self, req: RequestId) -> Option<Vec<u64>> {
        let cache = self.tables.requests.get(&req)?;
        let mut out = vec![0u64; self.pe_states.len()];
        let last = cache.blocks.len() - 1;
        for (i, placed) in cache.blocks.iter().enumerate() {
            out[placed.pe] +=
                if i == last { cache.last_tokens as u64 } else { self.tables.block_size as u64 };
        }
        Some(out)
    }

    /// Recompute invariants from the tables; errors on any mismatch.
    pub fn validate(&self) -> Result<(), String> {
        self.tables.validate_exclusive()?;
        let mut tokens = vec![0u64; self.pe_states.len()];
        let mut last = vec![0u32; self.pe_states.len()];
        let mut used = vec![0u32; self.pe_states.len()];
        for id in self.tables.requests.keys() {
            let cache = &self.tables.requests[id];
            if cache.last_tokens == 0 || cache.last_tokens > self.tables.block_size {
                return Err(format!("request {id} last block has {} tokens", cache.last_tokens));
            }
            let last_idx = cache.blocks.len() - 1;
            for (i, placed) in cache.blocks.iter().enumerate() {
                tokens[placed.pe] += if i == last_idx {
                    cache.last_tokens as u64
                } else {
                    self.tables.block_size as u64
                };
                used[placed.pe] += 1;
                if i == last_idx {
                    last[placed.pe] += 1;
                }
            }
        }
        for s in &self.pe_states {
            if s.tokens != tokens[s.index] {
                return Err(format!("PE {} tokens {} != recomputed {}", s.index, s.tokens, tokens[s.index]));
            }
            if s.last_blocks != last[s.index] {
                return Err(format!("PE {} last blocks mismatch", s.index));
            }
            if s.free_blocks + used[s.index] != s.capacity_blocks {
                return Err(format!("PE {} free-block count mismatch", s.index));
            }
            if s.tokens > s.capacity_blocks as u64 * self.tables.block_size as u64 {
                return Err(format!("PE {} over token capacity", s.index));
            }
        }
        Ok(())
    }
}

/// PEs with no free block always lose; both ineligible fall back to index
/// order so the tree stays total.
fn eligible_cmp(
    states: &[PeState],
    a: usize,
    b: usize,
    cmp: fn(&PeState, &PeState) -> Ordering,
) -> Ordering {
    let (sa, sb) = (&states[a], &states[b]);
    match (sa.free_blocks > 0, sb.free_blocks > 0) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => sa.index.cmp(&sb.index),
        (true, true) => cmp(sa, sb),
    }
}

fn nearest_of(centrals: &[u8], coord: u8) -> u8 {
    let mut best = centrals[0];
    let mut best_d = u32::MAX;
    for &c in centrals {
        let d = (c as i32 - coord as i32).unsigned_abs();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Coarse full-length-static baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error("no PE group has room for a full-window reservation")]
    NoGroupFits,
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
}

#[derive(Debug, Clone)]
struct GroupState {
    members: Vec<usize>,
    capacity_tokens: u64,
    reserved_tokens: u64,
    requests: BTreeMap<RequestId, u64>,
}

/// Baseline policy: each request reserves the full context window inside a
/// single fixed PE group for its whole lifetime. Admission fails when no
/// single group has room, even if total free capacity suffices.
#[derive(Debug, Clone)]
pub struct CoarseAllocator {
    groups: Vec<GroupState>,
    reserve_tokens: u64,
    pe_count: usize,
}

impl CoarseAllocator {
    /// `group_size` PEs per group (linear indices grouped consecutively),
    /// each group holding `group_capacity_tokens`, with every request
    /// reserving `reserve_tokens`.
    pub fn new(
        pe_count: usize,
        group_size: usize,
        group_capacity_tokens: u64,
        reserve_tokens: u64,
    ) -> Self {
        assert!(group_size >= 1 && pe_count % group_size == 0);
        let groups = (0..pe_count / group_size)
            .map(|g| GroupState {
                members: (g * group_size..(g + 1) * group_size).collect(),
                capacity_tokens: group_capacity_tokens,
                reserved_tokens: 0,
                requests: BTreeMap::new(),
            })
            .collect();
        Self { groups, reserve_tokens, pe_count }
    }

    /// First-fit admission: the lowest-index group with a free reservation.
    pub fn allocate(&mut self, req: RequestId, tokens: u64) -> Result<usize, CoarseError> {
        let g = self
            .groups
            .iter()
            .position(|g| g.capacity_tokens - g.reserved_tokens >= self.reserve_tokens)
            .ok_or(CoarseError::NoGroupFits)?;
        let group = &mut self.groups[g];
        group.reserved_tokens += self.reserve_tokens;
        group.requests.insert(req, tokens);
        Ok(g)
    }

    pub fn grow(&mut self, req: RequestId) -> Result<(), CoarseError> {
        for group in &mut self.groups {
            if let Some(tokens) = group.requests.get_mut(&req) {
                *tokens += 1;
                return Ok(());
            }
        }
        Err(CoarseError::UnknownRequest(req))
    }

    pub fn free(&mut self, req: RequestId) -> Result<(), CoarseError> {
        for group in &mut self.groups {
            if group.requests.remove(&req).is_some() {
                group.reserved_tokens -= self.reserve_tokens;
                return Ok(());
            }
        }
        Err(CoarseError::UnknownRequest(req))
    }

    pub fn can_admit(&self) -> bool {
        self.groups
            .iter()
            .any(|g| g.capacity_tokens - g.reserved_tokens >= self.reserve_tokens)
    }

    /// Wasted fraction of reserved space: (reserved - used) / reserved.
    pub fn waste(&self) -> f64 {
        let reserved: u64 =
            self.groups.iter().map(|g| g.requests.len() as u64 * self.reserve_tokens).sum();
        if reserved == 0 {
            return 0.0;
        }
        let used: u64 = self.groups.iter().flat_map(|g| g.requests.values()).sum();
        (reserved - used) as f64 / reserved as f64
    }

    /// Actual resident tokens per PE (a group's tokens spread evenly over
    /// its members).
    pub fn per_pe_tokens(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.pe_count];
        for g in &self.groups {
            let total: u64 = g.requests.values().sum();
            let share = total as f64 / g.members.len() as f64;
            for &pe in &g.members {
                out[pe] = share;
            }
        }
        out
    }

    pub fn per_pe_capacity(&self) -> f64 {
        self.groups[0].capacity_tokens as f64 / self.groups[0].members.len() as f64
    }

    pub fn fragmentation(&self) -> f64 {
        fragmentation_ratio(&self.per_pe_tokens(), self.per_pe_capacity())
    }

    pub fn request_tokens_per_pe(&self, req: RequestId) -> Option<Vec<f64>> {
        for g in &self.groups {
            if let Some(&tokens) = g.requests.get(&req) {
                let mut out = vec![0.0; self.pe_count];
                let share = tokens as f64 / g.members.len() as f64;
                for &pe in &g.members {
                    out[pe] = share;
                }
                return Some(out);
            }
        }
        None
    }

    pub fn request_group(&self, req: RequestId) -> Option<usize> {
        self.groups.iter().position(|g| g.requests.contains_key(&req))
    }

    pub fn group_members(&self, group: usize) -> &[usize] {
        &self.groups[group].members
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(index: usize, tokens: u64, dist: u32) -> PeState {
        PeState {
            coord: Pe::from_index(index, 4),
            index,
            tokens,
            last_blocks: 0,
            center_distance: dist,
            path_load_x: 0,
            path_load_y: 0,
            free_blocks: 8,
            capacity_blocks: 8,
        }
    }

    #[test]
    fn cmp_full_prefers_fewer_tokens_then_farther() {
        let a = state(0, 5, 0);
        let b = state(1, 0, 0);
        assert_eq!(cmp_full(&a, &b), Ordering::Greater); // 0 tokens wins
        let a = state(0, 3, 2);
        let b = state(1, 3, 0);
        assert_eq!(cmp_full(&a, &b), Ordering::Less); // distance 2 wins
        let a = state(0, 3, 1);
        let b = state(1, 3, 1);
        assert_eq!(cmp_full(&a, &b), Ordering::Less); // index order
    }

    #[test]
    fn cmp_last_key_order() {
        let a = state(0, 3, 0);
        let b = state(1, 3, 2);
        assert_eq!(cmp_last(&a, &b), Ordering::Less); // central PE wins
        let mut a = state(0, 3, 1);
        let mut b = state(1, 3, 1);
        a.path_load_x = 10;
        b.path_load_x = 0;
        assert_eq!(cmp_last(&a, &b), Ordering::Greater); // lighter X path wins
        a.path_load_x = 0;
        assert_eq!(cmp_last(&a, &b), Ordering::Less); // all equal: index
    }

    #[test]
    fn slot_address_formula() {
        assert_eq!(slot_address(0, 2, 3, 64, 128), 16768);
        assert_eq!(slot_address(4096, 0, 0, 64, 128), 4096);
        let a = slot_address(0, 1, 5, 64, 128);
        let b = slot_address(0, 1, 6, 64, 128);
        assert_eq!(b - a, 128);
    }

    #[test]
    fn allocate_first_block_on_empty_mesh_goes_far() {
        // All empty: full block goes to max center-distance among min-token
        // PEs, lowest index among those. On 4x4 that's PE(0,0) (distance 2).
        let mut alloc = SpatialAllocator::new(4, 8, 64, 128);
        let blocks = alloc.allocate(1, 2 * 64).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].pe, 0);
        // The last block goes to a central PE: PE(1,1) = index 5.
        assert_eq!(blocks[1].pe, Pe::new(1, 1).index(4));
    }

    #[test]
    fn step1_arithmetic() {
        // 2.5b tokens => 2 full blocks + half-filled last block.
        let mut alloc = SpatialAllocator::new(2, 16, 64, 128);
        let blocks = alloc.allocate(9, 160).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(alloc.tables.request(9).unwrap().last_tokens, 32);
        // Exactly b tokens => a single (full) last block.
        let blocks = alloc.allocate(10, 64).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(alloc.tables.request(10).unwrap().last_tokens, 64);
    }

    #[test]
    fn allocate_then_free_restores_state() {
        let mut alloc = SpatialAllocator::new(4, 8, 64, 128);
        let before = alloc.pe_states().to_vec();
        alloc.allocate(1, 300).unwrap();
        alloc.allocate(2, 77).unwrap();
        alloc.free(1).unwrap();
        alloc.free(2).unwrap();
        assert_eq!(alloc.pe_states(), &before[..]);
        assert!(alloc.validate().is_ok());
        assert_eq!(alloc.free(1).unwrap_err(), AllocError::UnknownRequest(1));
    }

    #[test]
    fn out_of_capacity_is_exact() {
        let mut alloc = SpatialAllocator::new(2, 2, 4, 8);
        // 4 PEs x 2 blocks x 4 tokens = 32 tokens capacity.
        alloc.allocate(1, 28).unwrap(); // 7 blocks
        let err = alloc.allocate(2, 5).unwrap_err();
        assert_eq!(err, AllocError::OutOfCapacity { needed: 2, free: 1 });
        // A single-block request still fits: no false failures.
        alloc.allocate(3, 4).unwrap();
    }

    #[test]
    fn growth_reuses_then_allocates() {
        let mut alloc = SpatialAllocator::new(2, 4, 4, 8);
        alloc.allocate(1, 3).unwrap();
        assert_eq!(alloc.grow(1).unwrap(), Growth::ReusedLast); // 4/4 now
        match alloc.grow(1).unwrap() {
            Growth::NewBlock(_) => {}
            g => panic!("expected new block, got {g:?}"),
        }
        assert_eq!(alloc.tables.request(1).unwrap().last_tokens, 1);
        assert!(alloc.validate().is_ok());
    }

    #[test]
    fn randomized_ops_keep_invariants_and_match_linear_scan() {
        let mut alloc = SpatialAllocator::new(4, 16, 8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut live: Vec<RequestId> = Vec::new();
        let mut next_id = 0u64;
        for step in 0..600 {
            let roll: f64 = rng.gen();
            if roll < 0.5 || live.is_empty() {
                let tokens = rng.gen_range(1..40);
                if alloc.blocks_needed(tokens) <= alloc.free_blocks_total() {
                    // Linear-scan prediction of the first placement.
                    let expect = linear_scan(alloc.pe_states(), if tokens > 8 { cmp_full } else { cmp_last });
                    let placed = alloc.allocate(next_id, tokens).unwrap();
                    assert_eq!(placed[0].pe, expect, "step {step}");
                    live.push(next_id);
                    next_id += 1;
                }
            } else if roll < 0.8 {
                let id = live[rng.gen_range(0..live.len())];
                let _ = alloc.grow(id);
            } else {
                let id = live.swap_remove(rng.gen_range(0..live.len()));
                alloc.free(id).unwrap();
            }
            if step % 37 == 0 {
                alloc.validate().unwrap();
            }
        }
        alloc.validate().unwrap();
    }

    fn linear_scan(states: &[PeState], cmp: fn(&PeState, &PeState) -> Ordering) -> usize {
        states
            .iter()
            .filter(|s| s.free_blocks > 0)
            .min_by(|a, b| cmp(a, b))
            .map(|s| s.index)
            .expect("some PE has room")
    }

    #[test]
    fn selection_cost_is_logarithmic() {
        let mut alloc = SpatialAllocator::new(4, 64, 4, 32);
        let depth = alloc.tree_depth(); // log2(16) = 4
        assert_eq!(depth, 4);
        let before = alloc.comparator_evals();
        // 32 single-block requests: one full... none; one last placement each,
        // plus the path-load updates around the chosen PE.
        for i in 0..32 {
            alloc.allocate(i, 4).unwrap();
        }
        let per_block = (alloc.comparator_evals() - before) as f64 / 32.0;
        // Two trees x depth per state update; path-load updates touch at
        // most 2(side+1) PEs. Bound: 2*depth*(2*side+3).
        let bound = 2.0 * depth as f64 * (2.0 * 4.0 + 3.0);
        assert!(per_block <= bound, "per_block {per_block} > bound {bound}");
    }

    #[test]
    fn greedy_growth_keeps_balance_within_one_block() {
        let mut alloc = SpatialAllocator::new(4, 32, 8, 16);
        for i in 0..300 {
            alloc.allocate(i, 8).unwrap(); // one block at a time
            let tokens = alloc.per_pe_tokens();
            let max = *tokens.iter().max().unwrap();
            let min = *tokens.iter().min().unwrap();
            assert!(max - min <= 8, "imbalance {} at step {i}", max - min);
        }
    }

    #[test]
    fn coarse_worked_example() {
        // Two groups of two PEs, 1.25L capacity per group, L = 1000.
        let l = 1000;
        let mut coarse = CoarseAllocator::new(4, 2, 1250, l);
        coarse.allocate(0, 250).unwrap();
        coarse.allocate(1, 500).unwrap();
        // Third full-window request does not fit in any single group.
        assert_eq!(coarse.allocate(2, 1000).unwrap_err(), CoarseError::NoGroupFits);
        assert!((coarse.waste() - 0.625).abs() < 1e-12);
        coarse.free(0).unwrap();
        coarse.allocate(2, 1000).unwrap();
    }

    #[test]
    fn coarse_empty_system_uses_first_group() {
        let mut coarse = CoarseAllocator::new(8, 2, 4096, 1024);
        assert_eq!(coarse.allocate(7, 10).unwrap(), 0);
    }

    #[test]
    fn fragmentation_and_imbalance_formulas() {
        assert_eq!(fragmentation_ratio(&[5.0, 5.0, 5.0], 10.0), 0.0);
        assert_eq!(fragmentation_ratio(&[10.0, 0.0], 10.0), 1.0);
        assert_eq!(imbalance_ratio(&[3.0, 3.0, 3.0]), 0.0);
        assert_eq!(imbalance_ratio(&[4.0, 0.0, 0.0]), 1.0);
        assert_eq!(imbalance_ratio(&[0.0, 0.0]), 0.0);
        let v = [2.0, 5.0, 3.0];
        assert!((imbalance_ratio(&v) - 3.0 / 5.0).abs() < 1e-12);
    }
}
