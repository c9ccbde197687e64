//! Desk-scale emulation of mixed-precision inference kernels.
//!
//! The crate models, bit-for-bit, the numeric pipeline of a dequantize-and-
//! multiply GEMM and a quantized-KV attention kernel as they would execute on
//! tensor-core hardware, together with analytic models of the memory system
//! behaviour those kernels depend on:
//!
//! * [`fp16`] — IEEE binary16 values with explicit round-to-nearest-even
//!   conversion; every "FP16 computation" in this crate means "multiply/add in
//!   binary32, round to binary16 at designated points".
//! * [`tensor`] — row-major tensor containers and the raw-binary + JSON
//!   sidecar file format.
//! * [`quant`] — group quantization, dequantization and the KV cache.
//! * [`memmodel`] — warp-level models of global-memory coalescing, shared
//!   memory bank conflicts, the `ldmatrix` crossbar and the swizzle function.
//! * [`mma`] — tensor-core tile emulation: fragment lane layouts and the
//!   `D = A*B + C` primitive.
//! * [`packer`] — offline hardware-aware weight packing and its file format.
//! * [`gemm`] — the online mixed-precision GEMM pipeline and its oracle.
//! * [`attention`] — Q rearrangement, quantized-KV attention and its oracle.
//! * [`sched`] — a deterministic three-unit cycle simulator for the software
//!   pipelines emitted by the GEMM and attention paths.
//!
//! Everything is pure and deterministic: operations take immutable inputs and
//! return new values, so independent tiles, heads and schedules may be
//! evaluated concurrently.

pub mod attention;
pub mod error;
pub mod fp16;
pub mod gemm;
pub mod memmodel;
pub mod mma;
pub mod packer;
pub mod quant;
pub mod sched;
pub mod tensor;

pub use error::{Error, Result};
pub use fp16::{fp16_round, Half};
pub use tensor::{Dtype, Tensor};
