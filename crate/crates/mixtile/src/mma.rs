//! Bit-exact emulation of tensor-core MMA tiles and fragment lane layouts.
//!
//! One canonical layout family is implemented: the m16n8k16 f16 tile and its
//! m8n8 sub-tiles. Per-lane slot positions follow the hardware tables:
//!
//! * A operand, 16x16 f16, 8 values per lane: element (r, k) lives in lane
//!   `(r%8)*4 + (k%8)/2`, slot `4*(k/8) + 2*(r/8) + k%2`.
//! * B operand, 16x8 f16, 4 values per lane: element (k, n) lives in lane
//!   `n*4 + (k%8)/2`, slot `2*(k/8) + k%2`.
//! * C/D accumulator, 16x8 f32, 4 values per lane: element (r, n) lives in
//!   lane `(r%8)*4 + n/2`, slot `2*(r/8) + n%2`.
//!
//! `mma_emulate` computes `D = A*B + C` per lane with binary32 accumulation
//! of binary16 products, ascending k, looking operands up through the lane
//! maps rather than materializing tiles; the naive tile matmul with the same
//! rounding schedule is the independent oracle in the tests.
//!
//! `mma_emulate_exact` is the wide-accumulator variant used by the attention
//! score path: products of binary16 values are exact integer multiples of
//! 2^-48, so an i128 accumulator in that fixed-point grid is exact for any
//! summation order and rounds once at the very end. That single property is
//! what lets channel-interleaved fragment layouts reproduce a plain
//! dot-product oracle bit-for-bit.

use crate::error::{Error, Result};
use crate::fp16::Half;

/// MMA tile extents. Only (16, 8, 16) is executable in this artifact;
/// integer-MMA shapes exist as data on arch profiles but compute through the
/// same f16/f32 path after dequantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmaShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl MmaShape {
    pub const M16N8K16: MmaShape = MmaShape { m: 16, n: 8, k: 16 };
}

impl Default for MmaShape {
    fn default() -> Self {
        MmaShape::M16N8K16
    }
}

/// Operand role of a fragment. D shares the C layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    A,
    B,
    C,
}

/// Per-lane register values for one warp over one MMA tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment<T> {
    pub role: Role,
    pub shape: MmaShape,
    /// `regs[lane][slot]`.
    pub regs: Vec<Vec<T>>,
}

impl<T: Copy + Default> Fragment<T> {
    pub fn zeroed(role: Role, shape: MmaShape) -> Fragment<T> {
        let slots = slots_per_lane(role, shape);
        Fragment {
            role,
            shape,
            regs: vec![vec![T::default(); slots]; 32],
        }
    }
}

pub fn slots_per_lane(role: Role, shape: MmaShape) -> usize {
    match role {
        Role::A => shape.m * shape.k / 32,
        Role::B => shape.k * shape.n / 32,
        Role::C => shape.m * shape.n / 32,
    }
}

fn tile_dims(role: Role, shape: MmaShape) -> (usize, usize) {
    match role {
        Role::A => (shape.m, shape.k),
        Role::B => (shape.k, shape.n),
        Role::C => (shape.m, shape.n),
    }
}

fn check_shape(shape: MmaShape) -> Result<()> {
    if shape != MmaShape::M16N8K16 {
        return Err(Error::ExtentMismatch(format!(
            "only the 16x8x16 tile is executable, found {}x{}x{}",
            shape.m, shape.n, shape.k
        )));
    }
    Ok(())
}

/// Lane/slot of A element (r, k).
#[inline]
pub fn a_lane_slot(r: usize, k: usize) -> (usize, usize) {
    ((r % 8) * 4 + (k % 8) / 2, 4 * (k / 8) + 2 * (r / 8) + k % 2)
}

/// A element (r, k) held at (lane, slot).
#[inline]
pub fn a_elem(lane: usize, slot: usize) -> (usize, usize) {
    let r = lane / 4 + 8 * ((slot / 2) % 2);
    let k = 2 * (lane % 4) + 8 * (slot / 4) + slot % 2;
    (r, k)
}

/// Lane/slot of B element (k, n).
#[inline]
pub fn b_lane_slot(k: usize, n: usize) -> (usize, usize) {
    (n * 4 + (k % 8) / 2, 2 * (k / 8) + k % 2)
}

/// B element (k, n) held at (lane, slot).
#[inline]
pub fn b_elem(lane: usize, slot: usize) -> (usize, usize) {
    let k = 2 * (lane % 4) + 8 * (slot / 2) + slot % 2;
    let n = lane / 4;
    (k, n)
}

/// Lane/slot of C/D element (r, n).
#[inline]
pub fn c_lane_slot(r: usize, n: usize) -> (usize, usize) {
    ((r % 8) * 4 + n / 2, 2 * (r / 8) + n % 2)
}

/// C/D element (r, n) held at (lane, slot).
#[inline]
pub fn c_elem(lane: usize, slot: usize) -> (usize, usize) {
    let r = lane / 4 + 8 * (slot / 2);
    let n = 2 * (lane % 4) + slot % 2;
    (r, n)
}

/// Distribute a row-major tile into the canonical fragment layout.
///
/// The tile dims must equal the operand extents for `role`: A is m x k,
/// B is k x n, C is m x n.
pub fn gather_fragment<T: Copy + Default>(
    tile: &[T],
    role: Role,
    shape: MmaShape,
) -> Result<Fragment<T>> {
    check_shape(shape)?;
    let (rows, cols) = tile_dims(role, shape);
    if tile.len() != rows * cols {
        return Err(Error::ExtentMismatch(format!(
            "tile has {} elements, operand wants {rows}x{cols}",
            tile.len()
        )));
    }
    let mut frag = Fragment::zeroed(role, shape);
    for r in 0..rows {
        for c in 0..cols {
            let (lane, slot) = match role {
                Role::A => a_lane_slot(r, c),
                Role::B => b_lane_slot(r, c),
                Role::C => c_lane_slot(r, c),
            };
            frag.regs[lane][slot] = tile[r * cols + c];
        }
    }
    Ok(frag)
}

/// Inverse of [`gather_fragment`]: collect lane registers back into a
/// row-major tile. `scatter(gather(t)) == t` for every tile.
pub fn scatter_fragment<T: Copy + Default>(frag: &Fragment<T>) -> Result<Vec<T>> {
    check_shape(frag.shape)?;
    let (rows, cols) = tile_dims(frag.role, frag.shape);
    let mut tile = vec![T::default(); rows * cols];
    for lane in 0..32 {
        for slot in 0..slots_per_lane(frag.role, frag.shape) {
            let (r, c) = match frag.role {
                Role::A => a_elem(lane, slot),
                Role::B => b_elem(lane, slot),
                Role::C => c_elem(lane, slot),
            };
            tile[r * cols + c] = frag.regs[lane][slot];
        }
    }
    Ok(tile)
}

fn check_operands<T, U, V>(
    a: &Fragment<T>,
    b: &Fragment<U>,
    c: &Fragment<V>,
) -> Result<()> {
    if a.role != Role::A || b.role != Role::B || c.role != Role::C {
        return Err(Error::ExtentMismatch(format!(
            "operand roles must be A/B/C, found {:?}/{:?}/{:?}",
            a.role, b.role, c.role
        )));
    }
    check_shape(a.shape)?;
    if a.shape != b.shape || a.shape != c.shape {
        return Err(Error::ExtentMismatch("fragment shapes disagree".into()));
    }
    Ok(())
}

/// `D = A*B + C` with binary32 accumulation of binary16 products.
///
/// Products of two binary16 values are exact in binary32; each add rounds.
/// Accumulation order is ascending k, so chaining tiles along k equals one
/// long ascending-k accumulation and oracle equality is exact rather than
/// approximate.
pub fn mma_emulate(
    a: &Fragment<Half>,
    b: &Fragment<Half>,
    c: &Fragment<f32>,
) -> Result<Fragment<f32>> {
    check_operands(a, b, c)?;
    let shape = a.shape;
    let mut d = Fragment::<f32>::zeroed(Role::C, shape);
    for r in 0..shape.m {
        for n in 0..shape.n {
            let (lane, slot) = c_lane_slot(r, n);
            let mut acc = c.regs[lane][slot];
            for k in 0..shape.k {
                let (al, as_) = a_lane_slot(r, k);
                let (bl, bs) = b_lane_slot(k, n);
                acc += a.regs[al][as_].to_f32() * b.regs[bl][bs].to_f32();
            }
            d.regs[lane][slot] = acc;
        }
    }
    Ok(d)
}

/// Exact-sum accumulator fragment: i128 values in the 2^-48 fixed-point grid
/// (the product grid of two binary16 values).
pub type ExactFragment = Fragment<i128>;

/// `D = A*B + C` with an exact wide accumulator.
///
/// Every f16 value is an integer multiple of 2^-24 below 2^41, so products
/// are integer multiples of 2^-48 below 2^82 and i128 sums of up to a few
/// thousand of them are exact. Rounding happens once, in
/// [`exact_to_f32`].
pub fn mma_emulate_exact(
    a: &Fragment<Half>,
    b: &Fragment<Half>,
    c: &ExactFragment,
) -> Result<ExactFragment> {
    check_operands(a, b, c)?;
    let shape = a.shape;
    let mut d = ExactFragment::zeroed(Role::C, shape);
    for r in 0..shape.m {
        for n in 0..shape.n {
            let (lane, slot) = c_lane_slot(r, n);
            let mut acc = c.regs[lane][slot];
            for k in 0..shape.k {
                let (al, as_) = a_lane_slot(r, k);
                let (bl, bs) = b_lane_slot(k, n);
                let pa = a.regs[al][as_].to_fixed_q24() as i128;
                let pb = b.regs[bl][bs].to_fixed_q24() as i128;
                acc += pa * pb;
            }
            d.regs[lane][slot] = acc;
        }
    }
    Ok(d)
}

/// Round an exact 2^-48 fixed-point sum to binary32 (one correctly rounded
/// step: the integer-to-float cast rounds to nearest-even and the power-of-
/// two scale is exact).
#[inline]
pub fn exact_to_f32(sum: i128) -> f32 {
    (sum as f32) * (-48f32).exp2()
}
