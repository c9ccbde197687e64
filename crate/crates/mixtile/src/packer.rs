//! Offline hardware-aware weight packing.
//!
//! The packer runs the four-step procedure once, offline, so the online GEMM
//! can reload weights with a plain async copy plus register load and no
//! runtime shuffles:
//!
//! 1. widen low-bit codes to 16-bit containers;
//! 2. push the widened tile through the standard shared-memory-to-register
//!    pipeline ([`crate::memmodel::ldmatrix_emulate`], transposed for the B
//!    operand) so the crossbar establishes the MMA lane layout;
//! 3. compress each lane's codes back to low bits, permuting sub-word
//!    positions so the runtime I2F conversion emits values already in MMA
//!    slot order — the permutation is solved by probing the conversion, not
//!    hard-coded;
//! 4. flatten fragments into contiguous 32-bit words, two fragments per
//!    store by default, and append scales then zero points group-major.
//!
//! The resulting blob reloads one 128-byte line per warp access: one global
//! transaction, conflict-free bank access, and fragments that match the MMA
//! layout exactly. [`verify_layout`] replays those loads through the memory
//! model and reports all three properties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::memmodel::{
    bank_conflict_degree, coalesce_count, ldmatrix_emulate, tile16x16_row_addrs, AccessTrace,
    MemConfig, SharedTile,
};
use crate::mma::MmaShape;
use crate::quant::{dequantize, padded_k_extent, GroupAxis, QuantizedTensor};
use crate::tensor::{Dtype, Tensor};

pub const MAGIC: [u8; 4] = *b"TMPK";
pub const VERSION: u32 = 1;

/// Fragment storing order of a packed blob.
pub const LAYOUT_PASSTHROUGH: u32 = 0;
pub const LAYOUT_SINGLE_FRAGMENT: u32 = 1;
pub const LAYOUT_TWO_FRAGMENT: u32 = 2;

/// Target-architecture description the packer adapts to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub id: u32,
    pub name: String,
    pub mma_m: usize,
    pub mma_n: usize,
    pub mma_k: usize,
    pub has_ldmatrix: bool,
    pub cache_line: usize,
    /// Two-fragment stores by default; single-fragment is available for
    /// narrow weights.
    pub two_fragment: bool,
}

impl ArchProfile {
    pub fn sm80() -> ArchProfile {
        ArchProfile {
            id: 0x80,
            name: "sm80".into(),
            mma_m: 16,
            mma_n: 8,
            mma_k: 16,
            has_ldmatrix: true,
            cache_line: 128,
            two_fragment: true,
        }
    }

    pub fn sm90() -> ArchProfile {
        ArchProfile {
            id: 0x90,
            name: "sm90".into(),
            ..ArchProfile::sm80()
        }
    }

    pub fn by_name(name: &str) -> Result<ArchProfile> {
        match name {
            "sm80" => Ok(ArchProfile::sm80()),
            "sm90" => Ok(ArchProfile::sm90()),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn with_single_fragment(mut self) -> ArchProfile {
        self.two_fragment = false;
        self
    }

    pub fn mma_shape(&self) -> MmaShape {
        MmaShape {
            m: self.mma_m,
            n: self.mma_n,
            k: self.mma_k,
        }
    }

    /// K rows consumed per fragment store group.
    pub fn k_tile_mult(&self) -> usize {
        if self.two_fragment {
            32
        } else {
            16
        }
    }

    pub fn layout_id(&self) -> u32 {
        if self.two_fragment {
            LAYOUT_TWO_FRAGMENT
        } else {
            LAYOUT_SINGLE_FRAGMENT
        }
    }
}

/// Offline-packed weights: header, 32-bit code words, then scales and zero
/// points group-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeights {
    pub version: u32,
    /// Logical (unpadded) extents.
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub zero_point: bool,
    pub arch_id: u32,
    pub layout_id: u32,
    pub perm_id: u32,
    pub words: Vec<u32>,
    pub scales: Vec<Half>,
    pub zero_points: Vec<u8>,
}

/// Layout verification outcome. Failures are fields, not errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutReport {
    /// Worst-case global transactions for one warp-load of one cache line.
    pub transactions: usize,
    /// Worst-case shared-memory conflict degree of the same loads.
    pub conflict_degree: usize,
    /// Fragments extracted by the runtime conversion equal the MMA lane
    /// layout of the logical codes.
    pub mma_aligned: bool,
}

impl LayoutReport {
    pub fn ok(&self) -> bool {
        self.transactions == 1 && self.conflict_degree == 1 && self.mma_aligned
    }
}

// --- sub-word conversion model ---------------------------------------------

/// Hardware I2F extraction order: the fast nibble conversion peels even
/// nibbles with one mask and odd nibbles with another, so values come out
/// interleaved rather than in storage order.
const EXTRACT_U4: [usize; 8] = [0, 2, 4, 6, 1, 3, 5, 7];
/// Byte extraction order of the 8-bit conversion over one 32-bit word.
const EXTRACT_I8: [usize; 4] = [0, 2, 1, 3];

/// Number of 32-bit words per 8-code fragment line.
pub fn words_per_fragment(bits: u8) -> usize {
    match bits {
        4 => 1,
        8 => 2,
        _ => panic!("no fragment words for bits {bits}"),
    }
}

/// Code value at a given sub-word position (nibble index for 4-bit codes,
/// byte index within the word for 8-bit).
pub fn subword_code(words: &[u32], bits: u8, zero_point: bool, slot: usize, pos: usize) -> i32 {
    match bits {
        4 => {
            let nib = ((words[0] >> (4 * pos)) & 0xf) as u8;
            if zero_point {
                nib as i32
            } else {
                ((nib as i8) << 4 >> 4) as i32
            }
        }
        8 => {
            let byte = ((words[slot / 4] >> (8 * pos)) & 0xff) as u8;
            if zero_point {
                byte as i32
            } else {
                byte as i8 as i32
            }
        }
        _ => panic!("no sub-word codes for bits {bits}"),
    }
}

/// Emulated runtime conversion: extract the 8 codes a lane's fragment words
/// hold, in the order the I2F sequence emits them.
pub fn i2f_extract_codes(words: &[u32], bits: u8, zero_point: bool) -> Vec<i32> {
    match bits {
        4 => {
            assert_eq!(words.len(), 1);
            EXTRACT_U4
                .iter()
                .map(|&p| {
                    let nib = ((words[0] >> (4 * p)) & 0xf) as u8;
                    if zero_point {
                        nib as i32
                    } else {
                        ((nib as i8) << 4 >> 4) as i32
                    }
                })
                .collect()
        }
        8 => {
            assert_eq!(words.len(), 2);
            let mut out = Vec::with_capacity(8);
            for w in words {
                for &p in &EXTRACT_I8 {
                    let byte = ((w >> (8 * p)) & 0xff) as u8;
                    out.push(if zero_point {
                        byte as i32
                    } else {
                        byte as i8 as i32
                    });
                }
            }
            out
        }
        _ => panic!("no extraction for bits {bits}"),
    }
}

/// Solve the step-iii sub-word permutation by probing the conversion with
/// marker codes: `perm[slot]` is the sub-word position whose value the
/// conversion emits into `slot`.
pub fn solve_subword_permutation(bits: u8) -> Vec<usize> {
    match bits {
        4 => {
            let mut word = 0u32;
            for p in 0..8u32 {
                word |= p << (4 * p);
            }
            i2f_extract_codes(&[word], 4, true)
                .into_iter()
                .map(|v| v as usize)
                .collect()
        }
        8 => {
            // the byte order repeats per word; probing one word suffices
            let mut words = [0u32; 2];
            for (w, word) in words.iter_mut().enumerate() {
                for p in 0..4u32 {
                    *word |= (4 * w as u32 + p) << (8 * p);
                }
            }
            i2f_extract_codes(&words, 8, true)
                .into_iter()
                .take(4)
                .map(|v| v as usize)
                .collect()
        }
        _ => panic!("no permutation for bits {bits}"),
    }
}

/// Lehmer rank of a permutation (factorial number system); the inverse of
/// [`perm_unrank`]. Small enough to ride in the u32 header field.
pub fn perm_rank(perm: &[usize]) -> u32 {
    let n = perm.len();
    let mut rank = 0u32;
    for i in 0..n {
        let smaller = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count() as u32;
        rank = rank * (n - i) as u32 + smaller;
    }
    rank
}

pub fn perm_unrank(mut rank: u32, n: usize) -> Vec<usize> {
    let mut digits = vec![0u32; n];
    for i in (0..n).rev() {
        let base = (n - i) as u32;
        digits[i] = rank % base;
        rank /= base;
    }
    let mut pool: Vec<usize> = (0..n).collect();
    digits
        .into_iter()
        .map(|d| pool.remove(d as usize))
        .collect()
}

// --- packing ----------------------------------------------------------------

/// Codes of one 16x16 tile in fragment slot order for every lane.
///
/// Slot `s` of lane `l` is the B-operand element at local
/// `k = 2*(l%4) + 8*((s%4)/2) + s%2`, `n = 8*(s/4) + l/4`; these are exactly
/// the positions the transposed matrix load delivers.
fn b_slot_elem(lane: usize, slot: usize) -> (usize, usize) {
    let k = 2 * (lane % 4) + 8 * ((slot % 4) / 2) + slot % 2;
    let n = 8 * (slot / 4) + lane / 4;
    (k, n)
}

fn raw_code_bits(q: &QuantizedTensor, r: usize, c: usize) -> u16 {
    let cols = q.cols();
    let idx = r * cols + c;
    match q.bits {
        4 => q.codes.u4_at(idx) as u16,
        8 => match q.codes.dtype() {
            Dtype::U8 => q.codes.as_u8()[idx] as u16,
            _ => q.codes.as_i8()[idx] as u8 as u16,
        },
        _ => panic!("raw_code_bits on bits {}", q.bits),
    }
}

/// Run the offline four-step packing over every 16x16 tile of `q`.
///
/// The code matrix must already be padded: K to whole groups and the
/// fragment-store multiple, N to 16 columns ([`crate::quant::quantize_weights`]
/// produces exactly this shape). Tiles are visited n-tile-major, ascending k
/// inside, which is also the order the online GEMM consumes them.
pub fn pack_weights(q: &QuantizedTensor, arch: &ArchProfile) -> Result<PackedWeights> {
    if q.bits == 16 {
        return pack_passthrough(q, arch);
    }
    if !matches!(q.bits, 4 | 8) {
        return Err(Error::UnsupportedBits(q.bits));
    }
    if q.group_axis != GroupAxis::Rows {
        return Err(Error::InvalidConfig(
            "weights must be grouped along the reduction axis".into(),
        ));
    }
    let (kp, np) = (q.rows(), q.cols());
    let k_mult = arch.k_tile_mult();
    let [rows, cols] = q.logical_shape[..] else {
        return Err(Error::ExtentMismatch("weights must be 2-D".into()));
    };
    if kp % k_mult != 0 || np % 16 != 0 || kp != padded_k_extent(rows, q.group_size, k_mult) {
        return Err(Error::UnpaddedShape {
            rows: kp,
            cols: np,
            row_mult: k_mult,
            col_mult: 16,
        });
    }

    let perm = solve_subword_permutation(q.bits);
    let wpf = words_per_fragment(q.bits);
    let k_tiles = kp / 16;
    let n_tiles = np / 16;

    // per-tile fragments, tile grid row-major with the n dimension outer
    let mut frags: Vec<Vec<[u16; 8]>> = Vec::with_capacity(k_tiles * n_tiles);
    for nt in 0..n_tiles {
        for kt in 0..k_tiles {
            frags.push(pack_tile_fragment(q, kt, nt)?);
        }
    }

    // step iii: compress each lane line to words with the solved permutation
    let lane_words = |lanes: &Vec<[u16; 8]>, lane: usize| -> Vec<u32> {
        let codes = &lanes[lane];
        match q.bits {
            4 => {
                let mut word = 0u32;
                for (slot, &code) in codes.iter().enumerate() {
                    word |= ((code as u32) & 0xf) << (4 * perm[slot]);
                }
                vec![word]
            }
            _ => {
                let mut words = vec![0u32; 2];
                for (slot, &code) in codes.iter().enumerate() {
                    let w = slot / 4;
                    words[w] |= ((code as u32) & 0xff) << (8 * perm[slot % 4]);
                }
                words
            }
        }
    };

    // step iv: flatten lanes x fragments x words
    let mut words = Vec::with_capacity(frags.len() * 32 * wpf);
    if arch.two_fragment {
        for pair in frags.chunks(2) {
            for lane in 0..32 {
                for frag in pair {
                    words.extend(lane_words(frag, lane));
                }
            }
        }
    } else {
        for frag in &frags {
            for lane in 0..32 {
                words.extend(lane_words(frag, lane));
            }
        }
    }

    Ok(PackedWeights {
        version: VERSION,
        rows,
        cols,
        bits: q.bits,
        group_size: q.group_size,
        zero_point: q.zero_points.is_some(),
        arch_id: arch.id,
        layout_id: arch.layout_id(),
        perm_id: perm_rank(&perm),
        words,
        scales: q.scales.as_f16().to_vec(),
        zero_points: q
            .zero_points
            .as_ref()
            .map(|t| t.as_u8().to_vec())
            .unwrap_or_default(),
    })
}

/// Steps i+ii for one tile: widen codes to 16-bit containers and run them
/// through the transposed matrix load so the crossbar fixes the lane layout.
fn pack_tile_fragment(q: &QuantizedTensor, kt: usize, nt: usize) -> Result<Vec<[u16; 8]>> {
    let mut widened = Vec::with_capacity(256);
    for k in 0..16 {
        for n in 0..16 {
            let bits = raw_code_bits(q, kt * 16 + k, nt * 16 + n);
            widened.push(Half::from_bits(bits));
        }
    }
    let tile = SharedTile::new(16, 16, 32, false, &widened)?;
    let res = ldmatrix_emulate(&tile, &tile16x16_row_addrs(&tile), 4, true)?;
    let mut lanes = vec![[0u16; 8]; 32];
    for (lane, regs) in res.fragment.regs.iter().enumerate() {
        for (m, &(e0, e1)) in regs.iter().enumerate() {
            lanes[lane][2 * m] = e0.to_bits();
            lanes[lane][2 * m + 1] = e1.to_bits();
        }
    }
    Ok(lanes)
}

fn pack_passthrough(q: &QuantizedTensor, arch: &ArchProfile) -> Result<PackedWeights> {
    let data = q.codes.as_f16();
    let mut words = Vec::with_capacity(data.len().div_ceil(2));
    for pair in data.chunks(2) {
        let lo = pair[0].to_bits() as u32;
        let hi = pair.get(1).map_or(0, |h| h.to_bits() as u32);
        words.push(lo | (hi << 16));
    }
    let [rows, cols] = q.logical_shape[..] else {
        return Err(Error::ExtentMismatch("weights must be 2-D".into()));
    };
    Ok(PackedWeights {
        version: VERSION,
        rows,
        cols,
        bits: 16,
        group_size: 0,
        zero_point: false,
        arch_id: arch.id,
        layout_id: LAYOUT_PASSTHROUGH,
        perm_id: 0,
        words,
        scales: Vec::new(),
        zero_points: Vec::new(),
    })
}

// --- unpacking ---------------------------------------------------------------

impl PackedWeights {
    /// Padded code-matrix extents implied by the header.
    pub fn padded_dims(&self) -> (usize, usize) {
        if self.bits == 16 {
            return (self.rows, self.cols);
        }
        let k_mult = if self.layout_id == LAYOUT_TWO_FRAGMENT {
            32
        } else {
            16
        };
        (
            padded_k_extent(self.rows, self.group_size, k_mult),
            self.cols.div_ceil(16) * 16,
        )
    }

    /// Fragment words of (lane, tile): the online register load.
    pub fn fragment_words(&self, kt: usize, nt: usize, lane: usize) -> &[u32] {
        let wpf = words_per_fragment(self.bits);
        let (kp, _) = self.padded_dims();
        let k_tiles = kp / 16;
        let tile_idx = nt * k_tiles + kt;
        let base = if self.layout_id == LAYOUT_TWO_FRAGMENT {
            let pair = tile_idx / 2;
            let within = tile_idx % 2;
            pair * 64 * wpf + lane * 2 * wpf + within * wpf
        } else {
            tile_idx * 32 * wpf + lane * wpf
        };
        &self.words[base..base + wpf]
    }

    /// The extraction-order permutation recorded in the header.
    pub fn permutation(&self) -> Vec<usize> {
        perm_unrank(self.perm_id, if self.bits == 4 { 8 } else { 4 })
    }
}

/// Exact inverse of [`pack_weights`]: rebuild the padded code matrix, the
/// group metadata and the logical shape.
pub fn unpack_weights(p: &PackedWeights) -> Result<QuantizedTensor> {
    if p.version != VERSION {
        return Err(Error::BadVersion(p.version));
    }
    if p.bits == 16 {
        let mut data = Vec::with_capacity(p.rows * p.cols);
        for i in 0..p.rows * p.cols {
            let word = p.words[i / 2];
            let bits = if i % 2 == 0 {
                word as u16
            } else {
                (word >> 16) as u16
            };
            data.push(Half::from_bits(bits));
        }
        return Ok(QuantizedTensor::passthrough(Tensor::from_f16(
            vec![p.rows, p.cols],
            data,
        )));
    }

    let (kp, np) = p.padded_dims();
    let expected = expected_word_count(p, kp, np);
    if p.words.len() != expected {
        return Err(Error::Truncated {
            expected: expected * 4,
            actual: p.words.len() * 4,
        });
    }
    // Slot j's code sits at the sub-word position the header's permutation
    // recorded, so blobs packed for a different conversion order still
    // invert exactly.
    let perm = p.permutation();
    let mut codes = vec![0i32; kp * np];
    for nt in 0..np / 16 {
        for kt in 0..kp / 16 {
            for lane in 0..32 {
                let words = p.fragment_words(kt, nt, lane);
                for slot in 0..8 {
                    let code =
                        subword_code(words, p.bits, p.zero_point, slot, perm[slot % perm.len()]);
                    let (k, n) = b_slot_elem(lane, slot);
                    codes[(kt * 16 + k) * np + nt * 16 + n] = code;
                }
            }
        }
    }

    let groups = kp / p.group_size;
    let codes_tensor = match (p.bits, p.zero_point) {
        (4, true) => {
            let nib: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
            Tensor::from_u4_codes(vec![kp, np], &nib)
        }
        (4, false) => {
            let nib: Vec<u8> = codes.iter().map(|&c| (c as i8 as u8) & 0xf).collect();
            Tensor::from_u4_codes(vec![kp, np], &nib)
        }
        (8, true) => Tensor::from_u8(vec![kp, np], codes.iter().map(|&c| c as u8).collect()),
        (8, false) => Tensor::from_i8(vec![kp, np], codes.iter().map(|&c| c as i8).collect()),
        _ => unreachable!(),
    };

    if p.scales.len() != groups * np {
        return Err(Error::Truncated {
            expected: groups * np * 2,
            actual: p.scales.len() * 2,
        });
    }
    if p.zero_point && p.zero_points.len() != groups * np {
        return Err(Error::Truncated {
            expected: groups * np,
            actual: p.zero_points.len(),
        });
    }

    Ok(QuantizedTensor {
        codes: codes_tensor,
        scales: Tensor::from_f16(vec![groups, np], p.scales.clone()),
        zero_points: p
            .zero_point
            .then(|| Tensor::from_u8(vec![groups, np], p.zero_points.clone())),
        bits: p.bits,
        group_size: p.group_size,
        group_axis: GroupAxis::Rows,
        logical_shape: vec![p.rows, p.cols],
    })
}

fn expected_word_count(p: &PackedWeights, kp: usize, np: usize) -> usize {
    if p.bits == 16 {
        (p.rows * p.cols).div_ceil(2)
    } else {
        (kp / 16) * (np / 16) * 32 * words_per_fragment(p.bits)
    }
}

// --- layout verification ------------------------------------------------------

/// Replay the online load sequence through the memory model.
///
/// Every warp-load covers one 128-byte cache line of the code blob: lane i
/// takes word i. `transactions` and `conflict_degree` are worst cases over
/// all lines; `mma_aligned` checks that the runtime conversion of every
/// fragment equals the B-operand gather of the logical codes (and that the
/// 16-bit pass-through layout is the identity).
pub fn verify_layout(p: &PackedWeights) -> Result<LayoutReport> {
    let cfg = MemConfig::default();
    let mut transactions = 0;
    let mut conflict = 0;
    let lines = p.words.len().div_ceil(32);
    for line in 0..lines {
        let base = line as u64 * 128;
        let lanes_active = (p.words.len() - line * 32).min(32);
        let trace = AccessTrace::strided(lanes_active, base, 4, 4);
        transactions = transactions.max(coalesce_count(&trace, &cfg));
        conflict = conflict.max(bank_conflict_degree(&trace, &cfg));
    }

    let mma_aligned = check_mma_alignment(p)?;
    Ok(LayoutReport {
        transactions,
        conflict_degree: conflict,
        mma_aligned,
    })
}

fn check_mma_alignment(p: &PackedWeights) -> Result<bool> {
    let q = unpack_weights(p)?;
    if p.bits == 16 {
        return Ok(true);
    }
    let (kp, np) = p.padded_dims();
    for nt in 0..np / 16 {
        for kt in 0..kp / 16 {
            for lane in 0..32 {
                let words = p.fragment_words(kt, nt, lane);
                let extracted = i2f_extract_codes(words, p.bits, p.zero_point);
                for (slot, &code) in extracted.iter().enumerate() {
                    let (k, n) = b_slot_elem(lane, slot);
                    let want = q.code_at((kt * 16 + k) * np + nt * 16 + n);
                    if code != want {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

// --- container format -----------------------------------------------------------

impl PackedWeights {
    /// Serialize: magic, version, rows, cols, bits, group_size, zero-point
    /// flag, arch id, layout id, permutation id, code words, scales (f16),
    /// zero points (u8). All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.push(self.zero_point as u8);
        out.extend_from_slice(&self.arch_id.to_le_bytes());
        out.extend_from_slice(&self.layout_id.to_le_bytes());
        out.extend_from_slice(&self.perm_id.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for s in &self.scales {
            out.extend_from_slice(&s.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&self.zero_points);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PackedWeights> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                actual: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bits = r.u8()?;
        if !matches!(bits, 4 | 8 | 16) {
            return Err(Error::UnsupportedBits(bits));
        }
        let group_size = r.u32()? as usize;
        if bits != 16 && group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be positive".into()));
        }
        let zero_point = match r.u8()? {
            0 => false,
            1 => true,
            v => {
                return Err(Error::InvalidConfig(format!(
                    "zero-point flag must be 0 or 1, found {v}"
                )))
            }
        };
        let arch_id = r.u32()?;
        let layout_id = r.u32()?;
        let perm_id = r.u32()?;
        match (bits, layout_id) {
            (16, LAYOUT_PASSTHROUGH) => {}
            (16, _) | (_, LAYOUT_PASSTHROUGH) => {
                return Err(Error::InvalidConfig(format!(
                    "layout id {layout_id} does not fit {bits}-bit payload"
                )))
            }
            (_, LAYOUT_SINGLE_FRAGMENT | LAYOUT_TWO_FRAGMENT) => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown layout id {layout_id}"
                )))
            }
        }
        let perm_len = if bits == 4 { 8usize } else { 4 };
        if bits != 16 {
            let max_rank: u32 = (1..=perm_len as u32).product();
            if perm_id >= max_rank {
                return Err(Error::InvalidConfig(format!(
                    "permutation id {perm_id} out of range"
                )));
            }
        }

        // guard extreme headers before allocating
        let max_dim = 1usize << 20;
        if rows == 0 || cols == 0 || rows > max_dim || cols > max_dim {
            return Err(Error::InvalidConfig(format!(
                "unreasonable dims {rows}x{cols}"
            )));
        }

        let mut p = PackedWeights {
            version,
            rows,
            cols,
            bits,
            group_size,
            zero_point,
            arch_id,
            layout_id,
            perm_id,
            words: Vec::new(),
            scales: Vec::new(),
            zero_points: Vec::new(),
        };
        let (kp, np) = p.padded_dims();
        let n_words = expected_word_count(&p, kp, np);
        let groups = if bits == 16 { 0 } else { kp / group_size };
        let n_scales = groups * np;
        let n_zps = if zero_point { groups * np } else { 0 };

        let expected_len = r.pos + 4 * n_words + 2 * n_scales + n_zps;
        if bytes.len() != expected_len {
            return Err(Error::Truncated {
                expected: expected_len,
                actual: bytes.len(),
            });
        }
        p.words.reserve(n_words);
        for _ in 0..n_words {
            p.words.push(r.u32()?);
        }
        p.scales.reserve(n_scales);
        for _ in 0..n_scales {
            p.scales.push(Half::from_bits(r.u16()?));
        }
        p.zero_points = r.take(n_zps)?.to_vec();
        Ok(p)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<PackedWeights> {
        let bytes = std::fs::read(path)?;
        PackedWeights::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Quantize an f16 weight matrix with the padding the packer requires.
pub fn quantize_for_arch(
    w: &Tensor,
    bits: u8,
    group_size: usize,
    zero_point: bool,
    arch: &ArchProfile,
) -> Result<QuantizedTensor> {
    crate::quant::quantize_weights(w, bits, group_size, zero_point, arch.k_tile_mult(), 16)
}

/// `dequantize(unpack(p))` cropped to the logical shape: the reference-side
/// weight tensor of the path-equivalence theorem.
pub fn dequantize_unpacked(p: &PackedWeights) -> Result<Tensor> {
    let q = unpack_weights(p)?;
    if p.bits == 16 {
        return Ok(q.codes);
    }
    Ok(dequantize(&q).crop2d(p.rows, p.cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp16::fp16_round;
    use crate::quant::quantize_weights;
    use rand::prelude::*;

    fn h(x: f32) -> Half {
        fp16_round(x)
    }

    fn random_weights(rng: &mut impl Rng, k: usize, n: usize) -> Tensor {
        let data: Vec<Half> = (0..k * n)
            .map(|_| h(rng.random_range(-2.0f32..2.0)))
            .collect();
        Tensor::from_f16(vec![k, n], data)
    }

    #[test]
    fn permutation_is_solved_not_assumed() {
        // probing the emulated conversion recovers its extraction order
        let p4 = solve_subword_permutation(4);
        assert_eq!(p4, EXTRACT_U4.to_vec());
        let p8 = solve_subword_permutation(8);
        assert_eq!(p8, EXTRACT_I8.to_vec());
        // and the rank round-trips through the header encoding
        assert_eq!(perm_unrank(perm_rank(&p4), 8), p4);
        assert_eq!(perm_unrank(perm_rank(&p8), 4), p8);
    }

    #[test]
    fn constant_zero_point_tile_packs_to_replicated_words() {
        // all codes equal the zero point -> every word is the replicated
        // nibble pattern and the layout verifies
        let codes = QuantizedTensor {
            codes: Tensor::from_u4_codes(vec![32, 16], &[7u8; 512]),
            scales: Tensor::from_f16(vec![1, 16], vec![h(0.25); 16]),
            zero_points: Some(Tensor::from_u8(vec![1, 16], vec![7; 16])),
            bits: 4,
            group_size: 32,
            group_axis: GroupAxis::Rows,
            logical_shape: vec![32, 16],
        };
        let packed = pack_weights(&codes, &ArchProfile::sm80()).unwrap();
        assert!(packed.words.iter().all(|&w| w == 0x7777_7777));
        let report = verify_layout(&packed).unwrap();
        assert!(report.ok(), "{report:?}");
    }

    #[test]
    fn ramp_tile_word_matches_four_step_oracle() {
        // code(r, c) = (r*16 + c) % 16; an independent step-by-step oracle
        // executes widen -> lane layout -> permute and predicts word 0
        let nibbles: Vec<u8> = (0..512).map(|i| ((i / 16) * 16 + i % 16) as u8 % 16).collect();
        let codes = QuantizedTensor {
            codes: Tensor::from_u4_codes(vec![32, 16], &nibbles),
            scales: Tensor::from_f16(vec![1, 16], vec![h(1.0); 16]),
            zero_points: Some(Tensor::from_u8(vec![1, 16], vec![0; 16])),
            bits: 4,
            group_size: 32,
            group_axis: GroupAxis::Rows,
            logical_shape: vec![32, 16],
        };
        let packed = pack_weights(&codes, &ArchProfile::sm80()).unwrap();

        // oracle for lane 0, tile 0: slot s holds code of element
        // (k, n) = b_slot_elem(0, s); nibble position = extraction order
        let perm = solve_subword_permutation(4);
        let mut want = 0u32;
        for (s, &p) in perm.iter().enumerate() {
            let (k, n) = b_slot_elem(0, s);
            let code = (k * 16 + n) % 16;
            want |= (code as u32) << (4 * p);
        }
        // two-fragment layout: lane 0 of tile (kt=0, nt=0) is word 0
        assert_eq!(packed.words[0], want);
    }

    #[test]
    fn pass_through_is_identity_layout() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&mut rng, 8, 6);
        let q = QuantizedTensor::passthrough(w.clone());
        let packed = pack_weights(&q, &ArchProfile::sm80()).unwrap();
        assert_eq!(packed.layout_id, LAYOUT_PASSTHROUGH);
        assert_eq!(packed.perm_id, 0);
        let back = unpack_weights(&packed).unwrap();
        assert_eq!(back.codes, w);
        assert!(verify_layout(&packed).unwrap().ok());
    }

    #[test]
    fn u4_round_trip_128x128() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&mut rng, 128, 128);
        let q = quantize_weights(&w, 4, 128, true, 32, 16).unwrap();
        let packed = pack_weights(&q, &ArchProfile::sm80()).unwrap();
        let back = unpack_weights(&packed).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn i8_round_trip_64x64() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&mut rng, 64, 64);
        let q = quantize_weights(&w, 8, 64, false, 32, 16).unwrap();
        let packed = pack_weights(&q, &ArchProfile::sm80()).unwrap();
        let back = unpack_weights(&packed).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn single_fragment_layout_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&mut rng, 64, 32);
        let arch = ArchProfile::sm80().with_single_fragment();
        let q = quantize_weights(&w, 4, 64, true, arch.k_tile_mult(), 16).unwrap();
        let packed = pack_weights(&q, &arch).unwrap();
        assert_eq!(packed.layout_id, LAYOUT_SINGLE_FRAGMENT);
        assert_eq!(unpack_weights(&packed).unwrap(), q);
        assert!(verify_layout(&packed).unwrap().ok());
    }

    #[test]
    fn unpadded_shape_is_rejected() {
        let codes = QuantizedTensor {
            codes: Tensor::from_u4_codes(vec![16, 16], &[0u8; 256]),
            scales: Tensor::from_f16(vec![1, 16], vec![h(1.0); 16]),
            zero_points: Some(Tensor::from_u8(vec![1, 16], vec![0; 16])),
            bits: 4,
            group_size: 16,
            group_axis: GroupAxis::Rows,
            logical_shape: vec![16, 16],
        };
        // 16 k-rows cannot fill a two-fragment store group of 32
        assert!(matches!(
            pack_weights(&codes, &ArchProfile::sm80()),
            Err(Error::UnpaddedShape { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng, 64, 48);
        let q = quantize_weights(&w, 4, 64, true, 32, 16).unwrap();
        let packed = pack_weights(&q, &ArchProfile::sm80()).unwrap();
        let bytes = packed.to_bytes();
        let back = PackedWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, packed);

        // truncated payload
        assert!(matches!(
            PackedWeights::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        // corrupt magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            PackedWeights::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn packed_layout_verifies_clean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for (bits, gs, zp) in [(4, 64, true), (4, 128, false), (8, 64, true), (8, 128, false)] {
            let w = random_weights(&mut rng, 128, 64);
            let q = quantize_weights(&w, bits, gs, zp, 32, 16).unwrap();
            let packed = pack_weights(&q, &ArchProfile::sm80()).unwrap();
            let report = verify_layout(&packed).unwrap();
            assert_eq!(report.transactions, 1);
            assert_eq!(report.conflict_degree, 1);
            assert!(report.mma_aligned);
        }
    }

    #[test]
    fn naive_layouts_fail_where_packed_succeeds() {
        let cfg = MemConfig::default();
        // naive row-major u4 tile load: a misaligned 16x16 tile of a 128-col
        // u4 matrix spans multiple segments
        let row_bytes = 128 / 2;
        let mut lanes = Vec::new();
        for i in 0..32u64 {
            let r = i / 2;
            lanes.push(Some(r * row_bytes + 8 /* tile col offset */ + (i % 2) * 4));
        }
        let naive = AccessTrace::new(4, lanes);
        assert!(coalesce_count(&naive, &cfg) >= 2);

        // naive column loads collide eight deep (the control case)
        let column = AccessTrace::strided(32, 0, 32, 16);
        assert_eq!(bank_conflict_degree(&column, &cfg), 8);
    }

    #[test]
    fn unknown_arch_is_an_error() {
        assert!(matches!(
            ArchProfile::by_name("sm75"),
            Err(Error::UnknownArch(_))
        ));
    }
}
