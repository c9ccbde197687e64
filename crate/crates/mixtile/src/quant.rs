//! Group quantization, dequantization (the I2F step) and the KV cache.
//!
//! The quantizer is min/max asymmetric with an epsilon-floored scale, or
//! symmetric absmax with signed codes. 4-bit codes are unsigned nibbles in
//! zero-point form, 8-bit asymmetric codes are unsigned bytes, 8-bit
//! symmetric codes are signed. Scales are stored as binary16: codes are
//! computed against the rounded scale so that the dequantization formula
//! `fp16_round((code - zp) * scale)` is the bit-exact oracle every pipeline
//! path must reproduce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::{fp16_round, Half};
use crate::tensor::Tensor;

/// Scale floor: the smallest positive normal binary16, 2^-14.
pub const SCALE_EPS: f32 = 6.103_515_6e-5;

/// The W*x* A*y* KV*z* precision configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub kv_bits: u8,
    /// Elements sharing one scale along the quantized axis.
    pub group_size: usize,
    /// Asymmetric (zero-point) quantization when true.
    pub zero_point: bool,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            weight_bits: 4,
            act_bits: 16,
            kv_bits: 16,
            group_size: 128,
            zero_point: true,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.weight_bits, 4 | 8 | 16) {
            return Err(Error::UnsupportedBits(self.weight_bits));
        }
        if self.act_bits != 16 {
            return Err(Error::UnsupportedBits(self.act_bits));
        }
        if !matches!(self.kv_bits, 4 | 8 | 16) {
            return Err(Error::UnsupportedBits(self.kv_bits));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which axis of a 2-D code matrix the groups run along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupAxis {
    /// Groups are runs of consecutive rows within one column (weights: the
    /// reduction axis).
    Rows,
    /// Groups are runs of consecutive columns within one row (KV cache: the
    /// channel axis of a token row).
    Cols,
}

/// Low-bit codes plus per-group scale/zero-point metadata.
///
/// `codes` covers the group-padded extents; `logical_shape` records the true
/// extents before padding. Padding codes equal their group's zero point so
/// they dequantize to exact zeros. `bits == 16` is the pass-through case:
/// `codes` holds the raw f16 data and there are no scales.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Tensor,
    /// One scale per group, finite and strictly positive.
    pub scales: Tensor,
    /// One zero point per group; absent in symmetric mode.
    pub zero_points: Option<Tensor>,
    pub bits: u8,
    pub group_size: usize,
    pub group_axis: GroupAxis,
    pub logical_shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Pass-through wrapper for 16-bit data.
    pub fn passthrough(data: Tensor) -> QuantizedTensor {
        let shape = data.shape().to_vec();
        QuantizedTensor {
            codes: data,
            scales: Tensor::from_f16(vec![0], vec![]),
            zero_points: None,
            bits: 16,
            group_size: 0,
            group_axis: GroupAxis::Cols,
            logical_shape: shape,
        }
    }

    pub fn rows(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn cols(&self) -> usize {
        match self.codes.shape() {
            [_, c] => *c,
            [n] => *n,
            s => panic!("unexpected code shape {s:?}"),
        }
    }

    /// Signed integer value of the code at flat index `idx`.
    pub fn code_at(&self, idx: usize) -> i32 {
        match (self.bits, self.zero_points.is_some()) {
            (4, _) => {
                let nib = self.codes.u4_at(idx);
                if self.zero_points.is_some() {
                    nib as i32
                } else {
                    // two's complement nibble
                    ((nib as i8) << 4 >> 4) as i32
                }
            }
            (8, true) => self.codes.as_u8()[idx] as i32,
            (8, false) => self.codes.as_i8()[idx] as i32,
            (16, _) => panic!("code_at on a pass-through tensor"),
            (b, _) => panic!("unsupported bits {b}"),
        }
    }

    /// Number of groups along the grouped axis.
    pub fn groups_per_line(&self) -> usize {
        let extent = match (self.group_axis, self.codes.shape()) {
            (GroupAxis::Rows, [r, _]) => *r,
            (GroupAxis::Cols, [_, c]) => *c,
            (_, [n]) => *n,
            (_, s) => panic!("unexpected code shape {s:?}"),
        };
        extent.div_ceil(self.group_size)
    }

    /// Group index of the element at (row, col).
    pub fn group_of(&self, row: usize, col: usize) -> usize {
        let gpl = self.groups_per_line();
        match self.group_axis {
            GroupAxis::Rows => (row / self.group_size) * self.cols() + col,
            GroupAxis::Cols => row * gpl + col / self.group_size,
        }
    }

    pub fn scale_of(&self, group: usize) -> Half {
        self.scales.as_f16()[group]
    }

    pub fn zp_of(&self, group: usize) -> i32 {
        match &self.zero_points {
            Some(t) => t.as_u8()[group] as i32,
            None => 0,
        }
    }
}

/// Quantize one group in isolation. Returns (scale, zero_point, codes).
///
/// Asymmetric: `scale = max((max-min)/(2^bits - 1), eps)` with the range
/// extended to include zero when the group is constant, so constant groups
/// land exactly on a code; `zp = clamp(round(-min/scale), 0, 2^bits-1)`;
/// `code = clamp(round(v/scale) + zp, 0, 2^bits-1)`. Symmetric:
/// `scale = max(absmax/(2^(bits-1) - 1), eps)`, signed codes, no zero point.
/// Rounding is half-to-even throughout. The scale is rounded to binary16
/// before codes are computed against it.
fn quantize_one_group(values: &[Half], bits: u8, zero_point: bool) -> (Half, u8, Vec<i32>) {
    let vals: Vec<f32> = values.iter().map(|h| h.to_f32()).collect();
    let qmax = ((1u32 << bits) - 1) as f32;

    if zero_point {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in &vals {
            min = min.min(v);
            max = max.max(v);
        }
        if min == max {
            // Constant group: extend the range to zero so the constant lands
            // exactly on a code. The all-zero group degenerates to the eps
            // floor with zp = 0 and codes 0.
            min = min.min(0.0);
            max = max.max(0.0);
        }
        let scale = fp16_round(((max - min) / qmax).max(SCALE_EPS));
        let s = scale.to_f32();
        let zp = round_half_even(-min / s).clamp(0, qmax as i32) as u8;
        let codes = vals
            .iter()
            .map(|&v| (round_half_even(v / s) + zp as i32).clamp(0, qmax as i32))
            .collect();
        (scale, zp, codes)
    } else {
        let cmax = ((1i32 << (bits - 1)) - 1) as f32;
        let absmax = vals.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        let scale = fp16_round((absmax / cmax).max(SCALE_EPS));
        let s = scale.to_f32();
        let codes = vals
            .iter()
            .map(|&v| round_half_even(v / s).clamp(-(cmax as i32), cmax as i32))
            .collect();
        (scale, 0, codes)
    }
}

fn round_half_even(x: f32) -> i32 {
    let r = x.round_ties_even();
    debug_assert!(r.abs() < i32::MAX as f32);
    r as i32
}

/// K extent after group and tile padding: the smallest multiple of both
/// `group_size` and `k_mult` covering `k`, so groups and tiles stay whole.
pub fn padded_k_extent(k: usize, group_size: usize, k_mult: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let l = group_size / gcd(group_size, k_mult) * k_mult;
    k.div_ceil(l) * l
}

/// Quantize a vector with groups of `group_size` consecutive elements.
///
/// The code vector is padded to a whole number of groups; padding codes are
/// the group's zero point (zero in symmetric mode) so they dequantize to 0.
pub fn quantize_group(
    values: &[Half],
    bits: u8,
    group_size: usize,
    zero_point: bool,
) -> Result<QuantizedTensor> {
    if !matches!(bits, 4 | 8) {
        return Err(Error::UnsupportedBits(bits));
    }
    if group_size == 0 {
        return Err(Error::InvalidConfig("group_size must be positive".into()));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }

    let n = values.len();
    let groups = n.div_ceil(group_size).max(1);
    let padded = groups * group_size;
    let mut scales = Vec::with_capacity(groups);
    let mut zps = Vec::with_capacity(groups);
    let mut codes: Vec<i32> = Vec::with_capacity(padded);
    for g in 0..groups {
        let lo = g * group_size;
        let hi = (lo + group_size).min(n);
        let slice = if lo < n { &values[lo..hi] } else { &[][..] };
        let (scale, zp, mut gcodes) = if slice.is_empty() {
            (Half::from_f32(SCALE_EPS), 0, vec![])
        } else {
            quantize_one_group(slice, bits, zero_point)
        };
        let pad_code = if zero_point { zp as i32 } else { 0 };
        gcodes.resize(group_size, pad_code);
        codes.extend_from_slice(&gcodes);
        scales.push(scale);
        zps.push(zp);
    }

    let codes_tensor = encode_codes(&codes, vec![padded], bits, zero_point);
    Ok(QuantizedTensor {
        codes: codes_tensor,
        scales: Tensor::from_f16(vec![groups], scales),
        zero_points: zero_point.then(|| Tensor::from_u8(vec![groups], zps)),
        bits,
        group_size,
        group_axis: GroupAxis::Cols,
        logical_shape: vec![n],
    })
}

fn encode_codes(codes: &[i32], shape: Vec<usize>, bits: u8, zero_point: bool) -> Tensor {
    match (bits, zero_point) {
        (4, true) => {
            let nibbles: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
            Tensor::from_u4_codes(shape, &nibbles)
        }
        (4, false) => {
            let nibbles: Vec<u8> = codes.iter().map(|&c| (c as i8 as u8) & 0xf).collect();
            Tensor::from_u4_codes(shape, &nibbles)
        }
        (8, true) => Tensor::from_u8(shape, codes.iter().map(|&c| c as u8).collect()),
        (8, false) => Tensor::from_i8(shape, codes.iter().map(|&c| c as i8).collect()),
        _ => unreachable!(),
    }
}

/// Quantize a K x N weight matrix with groups along K (the reduction axis),
/// padding K up to a whole number of groups (and then to `k_mult` rows) and
/// N up to `n_mult` columns.
///
/// Padding columns quantize as all-zero groups; padding rows take their
/// group's zero point. Either way padded entries dequantize to exact zeros.
pub fn quantize_weights(
    w: &Tensor,
    bits: u8,
    group_size: usize,
    zero_point: bool,
    k_mult: usize,
    n_mult: usize,
) -> Result<QuantizedTensor> {
    if !matches!(bits, 4 | 8) {
        return Err(Error::UnsupportedBits(bits));
    }
    let [k, n] = *w.shape() else {
        return Err(Error::ExtentMismatch(format!(
            "weights must be 2-D, found {:?}",
            w.shape()
        )));
    };
    let data = w.as_f16();
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }

    let kp = padded_k_extent(k, group_size, k_mult);
    let groups = kp.div_ceil(group_size);
    let np = n.div_ceil(n_mult) * n_mult;

    let mut codes = vec![0i32; kp * np];
    let mut scales = vec![Half::ZERO; groups * np];
    let mut zps = vec![0u8; groups * np];
    let mut column = Vec::with_capacity(group_size);
    for c in 0..np {
        for g in 0..groups {
            let lo = g * group_size;
            let hi = (lo + group_size).min(k);
            column.clear();
            if c < n {
                for r in lo..hi {
                    column.push(data[r * n + c]);
                }
            }
            let (scale, zp, gcodes) = if column.is_empty() {
                // whole group is padding: behaves like an all-zero group
                (Half::from_f32(SCALE_EPS), 0, vec![])
            } else {
                quantize_one_group(&column, bits, zero_point)
            };
            scales[g * np + c] = scale;
            zps[g * np + c] = zp;
            let pad_code = if zero_point { zp as i32 } else { 0 };
            for r in lo..lo + group_size {
                let src = r - lo;
                codes[r * np + c] = if src < gcodes.len() {
                    gcodes[src]
                } else {
                    pad_code
                };
            }
        }
    }

    Ok(QuantizedTensor {
        codes: encode_codes(&codes, vec![kp, np], bits, zero_point),
        scales: Tensor::from_f16(vec![groups, np], scales),
        zero_points: zero_point.then(|| Tensor::from_u8(vec![groups, np], zps)),
        bits,
        group_size,
        group_axis: GroupAxis::Rows,
        logical_shape: vec![k, n],
    })
}

/// Elementwise `fp16_round((code - zp) * scale)` over the padded extents.
///
/// This exact formula is the oracle every pipeline path must match
/// bit-for-bit. For pass-through tensors it returns the data unchanged.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    if q.bits == 16 {
        return q.codes.clone();
    }
    let shape = q.codes.shape().to_vec();
    let (rows, cols) = match shape[..] {
        [r, c] => (r, c),
        [n] => (1, n),
        _ => panic!("unexpected code shape {shape:?}"),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (rr, cc) = if shape.len() == 1 { (0, c) } else { (r, c) };
            let g = q.group_of(rr, cc);
            let code = q.code_at(r * cols + c);
            let zp = q.zp_of(g);
            let s = q.scale_of(g).to_f32();
            out.push(fp16_round((code - zp) as f32 * s));
        }
    }
    Tensor::from_f16(shape, out)
}

/// Dequantize and crop away group/tile padding, restoring the logical shape.
pub fn dequantize_logical(q: &QuantizedTensor) -> Tensor {
    let full = dequantize(q);
    match q.logical_shape[..] {
        [n] => {
            let data = full.as_f16()[..n].to_vec();
            Tensor::from_f16(vec![n], data)
        }
        [r, c] => full.crop2d(r, c),
        _ => full,
    }
}

/// A single-layer KV cache: per-head K and V rows quantized per token with
/// groups along the channel dimension.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub kv_bits: u8,
    pub heads: usize,
    pub head_dim: usize,
    pub capacity: usize,
    pub group_size: usize,
    pub zero_point: bool,
    tokens: usize,
    /// Per head, one entry per token.
    k_rows: Vec<Vec<QuantizedTensor>>,
    v_rows: Vec<Vec<QuantizedTensor>>,
}

/// Tokens per macro-tile in the KV loading pipeline.
pub const MACRO_TILE_TOKENS: usize = 64;
/// Values per micro-tile (one tensor-core slice edge).
pub const MICRO_TILE_VALUES: usize = 16;

impl KvCache {
    pub fn new(
        kv_bits: u8,
        heads: usize,
        head_dim: usize,
        capacity: usize,
        group_size: usize,
        zero_point: bool,
    ) -> Result<KvCache> {
        if !matches!(kv_bits, 4 | 8 | 16) {
            return Err(Error::UnsupportedBits(kv_bits));
        }
        if head_dim % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be a multiple of 8, found {head_dim}"
            )));
        }
        Ok(KvCache {
            kv_bits,
            heads,
            head_dim,
            capacity,
            group_size,
            zero_point,
            tokens: 0,
            k_rows: vec![Vec::new(); heads],
            v_rows: vec![Vec::new(); heads],
        })
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn macro_tile_count(&self) -> usize {
        self.tokens.div_ceil(MACRO_TILE_TOKENS)
    }

    fn quantize_row(&self, row: &[Half]) -> Result<QuantizedTensor> {
        if self.kv_bits == 16 {
            Ok(QuantizedTensor::passthrough(Tensor::from_f16(
                vec![row.len()],
                row.to_vec(),
            )))
        } else {
            // Channel groups never straddle rows; clamp to the row length.
            let gs = self.group_size.min(self.head_dim);
            quantize_group(row, self.kv_bits, gs, self.zero_point)
        }
    }

    /// Append one token's K and V rows for every head. Returns the updated
    /// cache; the receiver is unchanged (append-only snapshot semantics).
    pub fn append(&self, k_new: &[Vec<Half>], v_new: &[Vec<Half>]) -> Result<KvCache> {
        if k_new.len() != self.heads || v_new.len() != self.heads {
            return Err(Error::ExtentMismatch(format!(
                "expected {} head rows, found {}/{}",
                self.heads,
                k_new.len(),
                v_new.len()
            )));
        }
        if self.tokens + 1 > self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
                requested: self.tokens + 1,
            });
        }
        let mut next = self.clone();
        for h in 0..self.heads {
            if k_new[h].len() != self.head_dim || v_new[h].len() != self.head_dim {
                return Err(Error::HeadDimMismatch {
                    cache: self.head_dim,
                    input: k_new[h].len(),
                });
            }
            next.k_rows[h].push(self.quantize_row(&k_new[h])?);
            next.v_rows[h].push(self.quantize_row(&v_new[h])?);
        }
        next.tokens += 1;
        Ok(next)
    }

    /// Dequantized K row for (head, token): exactly
    /// `dequantize(quantize_group(row))` truncated to head_dim.
    pub fn k_row_f16(&self, head: usize, token: usize) -> Vec<Half> {
        let q = &self.k_rows[head][token];
        dequantize(q).as_f16()[..self.head_dim].to_vec()
    }

    pub fn v_row_f16(&self, head: usize, token: usize) -> Vec<Half> {
        let q = &self.v_rows[head][token];
        dequantize(q).as_f16()[..self.head_dim].to_vec()
    }

    pub fn k_quant(&self, head: usize, token: usize) -> &QuantizedTensor {
        &self.k_rows[head][token]
    }

    pub fn v_quant(&self, head: usize, token: usize) -> &QuantizedTensor {
        &self.v_rows[head][token]
    }

    /// Token index range of macro-tile `tile`.
    pub fn macro_tile_range(&self, tile: usize) -> std::ops::Range<usize> {
        let lo = tile * MACRO_TILE_TOKENS;
        lo..(lo + MACRO_TILE_TOKENS).min(self.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn h(x: f32) -> Half {
        fp16_round(x)
    }

    fn random_halves(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<Half> {
        (0..n).map(|_| h(rng.random_range(lo..hi))).collect()
    }

    #[test]
    fn ramp_group_has_unit_scale() {
        // Formula by hand: range 15, 4 bits -> scale 1, zp 0, codes 0..15.
        let values: Vec<Half> = (0..16).map(|i| h(i as f32)).collect();
        let q = quantize_group(&values, 4, 16, true).unwrap();
        assert_eq!(q.scale_of(0), h(1.0));
        assert_eq!(q.zp_of(0), 0);
        for i in 0..16 {
            assert_eq!(q.code_at(i), i as i32);
        }
    }

    #[test]
    fn all_zero_group_uses_eps_scale_and_dequantizes_to_exact_zeros() {
        let values = vec![Half::ZERO; 16];
        let q = quantize_group(&values, 4, 16, true).unwrap();
        assert_eq!(q.scale_of(0).to_f32(), SCALE_EPS);
        assert_eq!(q.zp_of(0), 0);
        let deq = dequantize(&q);
        for v in deq.as_f16() {
            assert_eq!(v.to_bits(), 0);
        }
    }

    #[test]
    fn constant_group_lands_exactly_on_a_code() {
        // Brute-force round-trip: a constant group must come back exactly
        // after fp16 rounding.
        let values = vec![h(5.0); 32];
        let q = quantize_group(&values, 8, 32, true).unwrap();
        let first = q.code_at(0);
        for i in 0..32 {
            assert_eq!(q.code_at(i), first);
        }
        let deq = dequantize(&q);
        for v in deq.as_f16() {
            assert_eq!(*v, h(5.0));
        }
    }

    #[test]
    fn dequantize_formula_spot_values() {
        // code 12, scale 0.5, zp 4 -> 4.0
        let q = QuantizedTensor {
            codes: Tensor::from_u4_codes(vec![2], &[12, 4]),
            scales: Tensor::from_f16(vec![1], vec![h(0.5)]),
            zero_points: Some(Tensor::from_u8(vec![1], vec![4])),
            bits: 4,
            group_size: 2,
            group_axis: GroupAxis::Cols,
            logical_shape: vec![2],
        };
        let deq = dequantize(&q);
        assert_eq!(deq.as_f16()[0], h(4.0));
        // code == zp -> exact zero, any scale
        assert_eq!(deq.as_f16()[1].to_bits(), 0);
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let values = random_halves(&mut rng, 1024, -8.0, 8.0);
        let q = quantize_group(&values, 8, 128, true).unwrap();
        let deq = dequantize(&q);
        for (i, (&v, &d)) in values.iter().zip(deq.as_f16().iter()).enumerate() {
            let g = i / 128;
            let half_scale = q.scale_of(g).to_f32() / 2.0;
            let err = (v.to_f32() - d.to_f32()).abs();
            // one extra f16 ulp of slack for the final rounding
            let ulp = f16_ulp(v.to_f32());
            assert!(
                err <= half_scale + ulp,
                "idx {i}: v={} d={} err={err} bound={}",
                v.to_f32(),
                d.to_f32(),
                half_scale + ulp
            );
        }
    }

    pub(crate) fn f16_ulp(x: f32) -> f32 {
        let h = fp16_round(x);
        if !h.is_finite() {
            return f32::INFINITY;
        }
        let bits = h.to_bits() & 0x7fff;
        let next = Half::from_bits(bits + 1);
        if next.is_finite() {
            next.to_f32() - Half::from_bits(bits).to_f32()
        } else {
            32.0
        }
    }

    #[test]
    fn symmetric_codes_are_scale_equivariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values = random_halves(&mut rng, 64, -4.0, 4.0);
        let doubled: Vec<Half> = values.iter().map(|v| h(v.to_f32() * 2.0)).collect();
        let q1 = quantize_group(&values, 8, 64, false).unwrap();
        let q2 = quantize_group(&doubled, 8, 64, false).unwrap();
        for i in 0..64 {
            assert_eq!(q1.code_at(i), q2.code_at(i), "codes differ at {i}");
        }
        let s1 = q1.scale_of(0).to_f32();
        let s2 = q2.scale_of(0).to_f32();
        assert!((s2 - 2.0 * s1).abs() <= f16_ulp(2.0 * s1));
    }

    #[test]
    fn symmetric_4bit_codes_survive_nibble_packing() {
        let values: Vec<Half> = (-7..=7).map(|i| h(i as f32)).collect();
        let q = quantize_group(&values, 4, 15, false).unwrap();
        for (i, expected) in (-7i32..=7).enumerate() {
            assert_eq!(q.code_at(i), expected);
        }
    }

    #[test]
    fn kv_append_matches_quantize_group() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cache = KvCache::new(8, 2, 64, 16, 128, true).unwrap();
        let k: Vec<Vec<Half>> = (0..2)
            .map(|_| random_halves(&mut rng, 64, -1.0, 1.0))
            .collect();
        let v: Vec<Vec<Half>> = (0..2)
            .map(|_| random_halves(&mut rng, 64, -1.0, 1.0))
            .collect();
        let cache = cache.append(&k, &v).unwrap();
        assert_eq!(cache.token_count(), 1);
        let direct = quantize_group(&k[1], 8, 64, true).unwrap();
        assert_eq!(
            cache.k_row_f16(1, 0),
            dequantize(&direct).as_f16()[..64].to_vec()
        );
    }

    #[test]
    fn kv_16bit_is_pass_through() {
        let cache = KvCache::new(16, 1, 8, 4, 128, true).unwrap();
        let row: Vec<Half> = (0..8).map(|i| h(i as f32 * 0.25)).collect();
        let cache = cache
            .append(std::slice::from_ref(&row), std::slice::from_ref(&row))
            .unwrap();
        assert_eq!(cache.k_row_f16(0, 0), row);
        assert_eq!(cache.v_row_f16(0, 0), row);
    }

    #[test]
    fn sixty_four_tokens_make_one_macro_tile() {
        let mut cache = KvCache::new(8, 1, 8, 128, 128, true).unwrap();
        let row: Vec<Half> = (0..8).map(|i| h(i as f32)).collect();
        for _ in 0..64 {
            cache = cache
                .append(std::slice::from_ref(&row), std::slice::from_ref(&row))
                .unwrap();
        }
        assert_eq!(cache.macro_tile_count(), 1);
        assert_eq!(cache.macro_tile_range(0), 0..64);
    }

    #[test]
    fn capacity_overflow_is_an_error() {
        let cache = KvCache::new(8, 1, 8, 1, 128, true).unwrap();
        let row = vec![Half::ZERO; 8];
        let cache = cache
            .append(std::slice::from_ref(&row), std::slice::from_ref(&row))
            .unwrap();
        assert!(matches!(
            cache.append(std::slice::from_ref(&row), std::slice::from_ref(&row)),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let values = vec![Half::ONE, Half::INFINITY];
        assert!(matches!(
            quantize_group(&values, 8, 2, true),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn unsupported_bits_is_an_error() {
        assert!(matches!(
            quantize_group(&[Half::ONE], 3, 1, true),
            Err(Error::UnsupportedBits(3))
        ));
    }
}
