//! Analytic warp-level model of the GPU memory hierarchy.
//!
//! Three instruments live here, all pattern-only (no timing):
//!
//! * [`coalesce_count`] — how many aligned global-memory segments a warp-wide
//!   access touches; 1 is the ideal single transaction.
//! * [`bank_conflict_degree`] — the worst-case number of distinct addresses
//!   that land on one shared-memory bank for a warp-wide access. The model
//!   charges a lane's whole footprint in a single phase: each lane's access
//!   is split into 4-byte words and every word is posted to its bank
//!   `(addr/4) mod 32`. Identical addresses broadcast and do not conflict.
//!   Degree 1 means conflict-free.
//! * [`ldmatrix_emulate`] — the warp-wide matrix load: per-lane row reads,
//!   the internal crossbar redistribution into the canonical m8n8 fragment
//!   layout, and the access traces before and after redistribution.
//!
//! The swizzle is the XOR permutation over 16-byte chunks inside an
//! 8 x 128-byte unit: `chunk' = chunk XOR (row mod 8)`. Applying it twice is
//! the identity, and a chunk column spread over the 8 rows of a unit maps to
//! 8 distinct bank groups, which makes column-tile loads conflict-free while
//! row writes stay contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::Half;

/// Warp and memory-system geometry. The artifact models a 32-lane warp over
/// 32 four-byte banks with 128-byte global segments.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MemConfig {
    pub warp_size: usize,
    pub bank_count: usize,
    pub bank_width: usize,
    pub segment_size: usize,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            warp_size: 32,
            bank_count: 32,
            bank_width: 4,
            segment_size: 128,
        }
    }
}

/// Per-lane starting byte addresses for one warp-wide memory operation.
/// Inactive lanes are `None`. Width is uniform across the warp.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccessTrace {
    pub width_bytes: usize,
    pub lanes: Vec<Option<u64>>,
}

impl AccessTrace {
    pub fn new(width_bytes: usize, lanes: Vec<Option<u64>>) -> AccessTrace {
        AccessTrace { width_bytes, lanes }
    }

    /// `lane_count` active lanes, lane i at `base + i*stride`.
    pub fn strided(lane_count: usize, base: u64, stride: u64, width_bytes: usize) -> AccessTrace {
        AccessTrace {
            width_bytes,
            lanes: (0..lane_count)
                .map(|i| Some(base + i as u64 * stride))
                .collect(),
        }
    }

    pub fn active_addrs(&self) -> impl Iterator<Item = u64> + '_ {
        self.lanes.iter().filter_map(|a| *a)
    }
}

/// Number of distinct `segment_size`-aligned segments touched by the active
/// lanes; each lane's `[addr, addr+width)` interval contributes every segment
/// it overlaps.
pub fn coalesce_count(trace: &AccessTrace, cfg: &MemConfig) -> usize {
    let seg = cfg.segment_size as u64;
    let mut segments: Vec<u64> = Vec::new();
    for addr in trace.active_addrs() {
        let first = addr / seg;
        let last = (addr + trace.width_bytes as u64 - 1) / seg;
        for s in first..=last {
            if !segments.contains(&s) {
                segments.push(s);
            }
        }
    }
    segments.len()
}

/// Maximum number of distinct word addresses mapped to one bank.
///
/// 1 is conflict-free; broadcasts (identical addresses) do not conflict.
pub fn bank_conflict_degree(trace: &AccessTrace, cfg: &MemConfig) -> usize {
    let bw = cfg.bank_width as u64;
    let mut per_bank: Vec<Vec<u64>> = vec![Vec::new(); cfg.bank_count];
    for addr in trace.active_addrs() {
        let first_word = addr / bw;
        let last_word = (addr + trace.width_bytes as u64 - 1) / bw;
        for w in first_word..=last_word {
            let bank = (w % cfg.bank_count as u64) as usize;
            if !per_bank[bank].contains(&w) {
                per_bank[bank].push(w);
            }
        }
    }
    per_bank.iter().map(|v| v.len()).max().unwrap_or(0).max(1)
}

/// Chunk permutation of the 8 x 128-byte swizzle unit: 16-byte chunks, 8 per
/// row, `chunk' = chunk XOR (row mod 8)`.
pub fn swizzle_index(row: usize, col_chunk: usize) -> Result<usize> {
    if col_chunk >= 8 {
        return Err(Error::ChunkOutOfRange(col_chunk));
    }
    Ok(col_chunk ^ (row % 8))
}

/// Address-level form of the swizzle: XOR bits [6:4] with bits [9:7].
#[inline]
fn swizzle_addr(addr: u64) -> u64 {
    addr ^ (((addr >> 7) & 7) << 4)
}

/// A 2-D array of 16-bit elements in a modeled shared-memory region.
///
/// Writes and reads go through the optional swizzle, so access traces report
/// physical (post-swizzle) addresses.
#[derive(Clone, Debug)]
pub struct SharedTile {
    rows: usize,
    cols: usize,
    row_stride_bytes: usize,
    swizzled: bool,
    buf: Vec<u16>,
}

impl SharedTile {
    pub fn new(
        rows: usize,
        cols: usize,
        row_stride_bytes: usize,
        swizzled: bool,
        elems: &[Half],
    ) -> Result<SharedTile> {
        if row_stride_bytes < cols * 2 {
            return Err(Error::InvalidConfig(format!(
                "row stride {row_stride_bytes} smaller than row payload {}",
                cols * 2
            )));
        }
        assert_eq!(elems.len(), rows * cols);
        let bytes = (rows * row_stride_bytes).div_ceil(128) * 128;
        let mut tile = SharedTile {
            rows,
            cols,
            row_stride_bytes,
            swizzled,
            buf: vec![0u16; bytes / 2],
        };
        for r in 0..rows {
            for c in 0..cols {
                let logical = (r * row_stride_bytes + c * 2) as u64;
                let phys = tile.phys(logical);
                tile.buf[(phys / 2) as usize] = elems[r * cols + c].to_bits();
            }
        }
        Ok(tile)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_stride_bytes(&self) -> usize {
        self.row_stride_bytes
    }

    /// Logical byte address of element (r, c).
    pub fn addr_of(&self, r: usize, c: usize) -> u64 {
        (r * self.row_stride_bytes + c * 2) as u64
    }

    fn phys(&self, logical: u64) -> u64 {
        if self.swizzled {
            swizzle_addr(logical)
        } else {
            logical
        }
    }

    fn read_u16(&self, logical: u64) -> u16 {
        let phys = self.phys(logical);
        self.buf[(phys / 2) as usize]
    }
}

/// Per-lane register contents produced by one ldmatrix: `count` matrices,
/// each contributing two consecutive 16-bit elements per lane.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmatrixFragment {
    /// `regs[lane][matrix] = (elem0, elem1)`.
    pub regs: Vec<Vec<(Half, Half)>>,
    pub count: usize,
    pub transposed: bool,
}

/// Result of [`ldmatrix_emulate`]: the fragment plus the access traces of the
/// underlying row reads (before redistribution) and of the redistributed
/// pattern the crossbar delivers (one per 8x8 matrix, contiguous per-lane
/// words, conflict-free by construction).
#[derive(Clone, Debug)]
pub struct LdmatrixResult {
    pub fragment: LdmatrixFragment,
    pub pre_trace: AccessTrace,
    pub post_traces: Vec<AccessTrace>,
}

/// Emulate the warp-wide matrix load of `count` 8x8 matrices of 16-bit
/// elements. Lanes `0..8*count` supply the byte address of one matrix row
/// each (16-byte aligned, in `tile`'s logical address space).
///
/// In the canonical m8n8 layout lane `l` receives the two consecutive
/// elements at row `l/4`, columns `2*(l%4)` and `2*(l%4)+1` of each matrix.
/// With `transposed` the roles flip: lane `l` receives elements
/// `(2*(l%4), l/4)` and `(2*(l%4)+1, l/4)`.
pub fn ldmatrix_emulate(
    tile: &SharedTile,
    row_addrs: &[u64],
    count: usize,
    transposed: bool,
) -> Result<LdmatrixResult> {
    assert!(matches!(count, 1 | 2 | 4), "count must be 1, 2 or 4");
    assert_eq!(row_addrs.len(), 8 * count);
    for &a in row_addrs {
        if a % 16 != 0 {
            return Err(Error::MisalignedRowAddress(a));
        }
    }

    // Row reads: each participating lane fetches one 16-byte row.
    let mut lanes = vec![None; 32];
    for (l, &a) in row_addrs.iter().enumerate() {
        lanes[l] = Some(tile.phys(a));
    }
    let pre_trace = AccessTrace::new(16, lanes);

    let mut mats = Vec::with_capacity(count);
    for m in 0..count {
        let mut rows = [[Half::ZERO; 8]; 8];
        for r in 0..8 {
            let base = row_addrs[8 * m + r];
            for c in 0..8 {
                rows[r][c] = Half::from_bits(tile.read_u16(base + 2 * c as u64));
            }
        }
        mats.push(rows);
    }

    // Crossbar redistribution into per-lane registers.
    let mut regs = vec![Vec::with_capacity(count); 32];
    for (l, lane_regs) in regs.iter_mut().enumerate() {
        let (r, c) = (l / 4, 2 * (l % 4));
        for mat in &mats {
            let pair = if transposed {
                (mat[c][r], mat[c + 1][r])
            } else {
                (mat[r][c], mat[r][c + 1])
            };
            lane_regs.push(pair);
        }
    }

    // After redistribution each lane owns one word of a contiguous 128-byte
    // fragment image per matrix; the equivalent access pattern is coalesced
    // and conflict-free. This is the modeled payoff of the crossbar, not a
    // separate memory operation.
    let post_traces = (0..count)
        .map(|m| AccessTrace::strided(32, m as u64 * 128, 4, 4))
        .collect();

    Ok(LdmatrixResult {
        fragment: LdmatrixFragment {
            regs,
            count,
            transposed,
        },
        pre_trace,
        post_traces,
    })
}

/// Canonical row addresses for loading a 16x16-element tile as four 8x8
/// matrices ordered (row-half, col-half) = (0,0), (1,0), (0,1), (1,1).
pub fn tile16x16_row_addrs(tile: &SharedTile) -> Vec<u64> {
    let mut addrs = Vec::with_capacity(32);
    for (half_r, half_c) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        for r in 0..8 {
            addrs.push(tile.addr_of(half_r * 8 + r, half_c * 8));
        }
    }
    addrs
}

/// Reconstruct the source 8x8 matrices from a fragment (the inverse
/// lane-gather). Redistribution is a bijection, so this is total.
pub fn ldmatrix_scatter(frag: &LdmatrixFragment) -> Vec<[[Half; 8]; 8]> {
    let mut mats = vec![[[Half::ZERO; 8]; 8]; frag.count];
    for l in 0..32 {
        let (r, c) = (l / 4, 2 * (l % 4));
        for (m, mat) in mats.iter_mut().enumerate() {
            let (e0, e1) = frag.regs[l][m];
            if frag.transposed {
                mat[c][r] = e0;
                mat[c + 1][r] = e1;
            } else {
                mat[r][c] = e0;
                mat[r][c + 1] = e1;
            }
        }
    }
    mats
}
