//! The online mixed-precision GEMM pipeline and its oracle.
//!
//! `mixed_gemm` consumes activations (f16) and [`PackedWeights`], loads
//! packed fragments, dequantizes them in place (I2F + scale) and runs the
//! tensor-core tile loop. Its central theorem, enforced bit-for-bit by the
//! tests: the output equals `reference_gemm(a, dequantize(unpack(w)))` for
//! every bit width and every padded shape. Equality is exact because both
//! paths use the same dequantization formula, accumulate in binary32
//! strictly ascending in k, and round to binary16 only at the output.
//!
//! Alongside the numeric result the pipeline emits a [`PipelineSchedule`]
//! describing one pass of the software-pipelined mainloop: per k-tile one
//! prefetch record, one fused I2F+FMA record and one MMA record, with
//! prefetch held back by the buffer released `depth` tiles earlier.

use crate::error::{Error, Result};
use crate::fp16::{fp16_round, Half};
use crate::mma::{
    gather_fragment, mma_emulate, scatter_fragment, Fragment, MmaShape, Role,
};
use crate::packer::{
    dequantize_unpacked, i2f_extract_codes, perm_rank, solve_subword_permutation, ArchProfile,
    PackedWeights,
};
use crate::sched::{PipelineSchedule, StageKind};
use crate::tensor::Tensor;

/// One mixed-precision GEMM instance: f16 activations (M x K) against
/// packed weights (K x N).
#[derive(Clone, Debug)]
pub struct GemmProblem {
    pub activations: Tensor,
    pub weights: PackedWeights,
    /// Memory pipeline depth for the emitted schedule.
    pub depth: usize,
}

/// Triple-loop f16 matmul oracle: binary32 accumulation ascending k,
/// binary16 rounding at the output only.
pub fn reference_gemm(a: &Tensor, w_deq: &Tensor) -> Result<Tensor> {
    let [m, k] = *a.shape() else {
        return Err(Error::ExtentMismatch(format!(
            "activations must be 2-D, found {:?}",
            a.shape()
        )));
    };
    let [wk, n] = *w_deq.shape() else {
        return Err(Error::ExtentMismatch(format!(
            "weights must be 2-D, found {:?}",
            w_deq.shape()
        )));
    };
    if k != wk {
        return Err(Error::ExtentMismatch(format!(
            "inner extents disagree: {k} vs {wk}"
        )));
    }
    let av = a.as_f16();
    let wv = w_deq.as_f16();
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0f32;
            for i in 0..k {
                acc += av[r * k + i].to_f32() * wv[i * n + c].to_f32();
            }
            out.push(fp16_round(acc));
        }
    }
    Ok(Tensor::from_f16(vec![m, n], out))
}

/// A lane-distributed low-bit code fragment: the packed words one warp holds
/// for one 16x16 weight tile, before I2F.
#[derive(Clone, Debug)]
pub struct PackedFragment {
    pub bits: u8,
    pub zero_point: bool,
    pub perm_id: u32,
    /// `lanes[lane]` = the lane's fragment words.
    pub lanes: Vec<Vec<u32>>,
}

impl PackedFragment {
    /// The warp's register image of tile (kt, nt) of a packed blob.
    pub fn from_packed(p: &PackedWeights, kt: usize, nt: usize) -> PackedFragment {
        PackedFragment {
            bits: p.bits,
            zero_point: p.zero_point,
            perm_id: p.perm_id,
            lanes: (0..32)
                .map(|lane| p.fragment_words(kt, nt, lane).to_vec())
                .collect(),
        }
    }
}

/// Slot `s` of lane `l` holds the tile element at this (k, n) position; the
/// step-iii permutation guarantees the I2F output lands here directly.
fn packed_slot_elem(lane: usize, slot: usize) -> (usize, usize) {
    let k = 2 * (lane % 4) + 8 * ((slot % 4) / 2) + slot % 2;
    let n = 8 * (slot / 4) + lane / 4;
    (k, n)
}

/// I2F + scale application on one packed fragment, producing the f16
/// B-operand fragment of the requested n-half (0 or 1) of the tile.
///
/// `scales`/`zps` hold one entry per tile column (16). Per-lane values equal
/// `fp16_round((code - zp) * scale)` for the corresponding logical elements;
/// no cross-lane movement is involved — that is the payoff of packing.
pub fn dequant_fragment(
    frag: &PackedFragment,
    scales: &[Half],
    zps: &[i32],
    n_half: usize,
    expected_perm: u32,
) -> Result<Fragment<Half>> {
    if frag.perm_id != expected_perm {
        return Err(Error::PermutationMismatch {
            expected: expected_perm,
            found: frag.perm_id,
        });
    }
    assert_eq!(scales.len(), 16);
    assert_eq!(zps.len(), 16);
    let mut out = Fragment::<Half>::zeroed(Role::B, MmaShape::M16N8K16);
    for lane in 0..32 {
        let codes = i2f_extract_codes(&frag.lanes[lane], frag.bits, frag.zero_point);
        for j in 0..4 {
            let slot = 4 * n_half + j;
            let (_k, n) = packed_slot_elem(lane, slot);
            let v = (codes[slot] - zps[n]) as f32 * scales[n].to_f32();
            out.regs[lane][j] = fp16_round(v);
        }
    }
    Ok(out)
}

/// Run the online pipeline. Output is M x N f16, bit-identical to
/// `reference_gemm(activations, dequantize(unpack(weights)))`; the schedule
/// models one pass of the k-tile mainloop.
pub fn mixed_gemm(p: &GemmProblem, arch: &ArchProfile) -> Result<(Tensor, PipelineSchedule)> {
    let w = &p.weights;
    if w.arch_id != arch.id {
        return Err(Error::ArchMismatch {
            packed: w.arch_id,
            active: arch.id,
        });
    }
    let [m, k] = *p.activations.shape() else {
        return Err(Error::ExtentMismatch(format!(
            "activations must be 2-D, found {:?}",
            p.activations.shape()
        )));
    };
    if k != w.rows {
        return Err(Error::ExtentMismatch(format!(
            "activation K {k} vs weight K {}",
            w.rows
        )));
    }
    let n = w.cols;
    let (kp, np) = w.padded_dims();
    let (kp, np) = (kp.max(16), np.max(16));
    let kp = kp.div_ceil(16) * 16;
    let np = np.div_ceil(16) * 16;
    let mp = m.div_ceil(16) * 16;
    if w.bits != 16 && w.group_size % 16 != 0 {
        return Err(Error::InvalidConfig(format!(
            "group size {} must cover whole k-tiles",
            w.group_size
        )));
    }

    // padded activations, zero-filled
    let av = p.activations.as_f16();
    let mut a_pad = vec![Half::ZERO; mp * kp];
    for r in 0..m {
        for c in 0..k {
            a_pad[r * kp + c] = av[r * k + c];
        }
    }

    // padded dequantized weights for the pass-through and fragment paths
    let w_source = if w.bits == 16 {
        let raw = crate::packer::unpack_weights(w)?.codes;
        let rv = raw.as_f16();
        let mut padded = vec![Half::ZERO; kp * np];
        for r in 0..w.rows {
            for c in 0..w.cols {
                padded[r * np + c] = rv[r * w.cols + c];
            }
        }
        Some(padded)
    } else {
        None
    };

    let k_tiles = kp / 16;
    let m_tiles = mp / 16;
    let n8_tiles = np / 8;
    let expected_perm = if w.bits == 16 {
        0
    } else {
        perm_rank(&solve_subword_permutation(w.bits))
    };

    // A fragments are reused across every n-tile; build them once.
    let mut a_frags = Vec::with_capacity(m_tiles * k_tiles);
    for mt in 0..m_tiles {
        for kt in 0..k_tiles {
            let mut tile = vec![Half::ZERO; 256];
            for r in 0..16 {
                for c in 0..16 {
                    tile[r * 16 + c] = a_pad[(mt * 16 + r) * kp + kt * 16 + c];
                }
            }
            a_frags.push(gather_fragment(&tile, Role::A, MmaShape::M16N8K16)?);
        }
    }

    let mut out = vec![Half::ZERO; m * n];
    // N-major over output tiles, ascending k inside.
    for nt8 in 0..n8_tiles {
        let nt16 = nt8 / 2;
        let n_half = nt8 % 2;
        // dequantize this n-column strip once per k-tile
        let mut b_frags = Vec::with_capacity(k_tiles);
        for kt in 0..k_tiles {
            let b = if let Some(src) = &w_source {
                let mut tile = vec![Half::ZERO; 128];
                for kk in 0..16 {
                    for nn in 0..8 {
                        tile[kk * 8 + nn] = src[(kt * 16 + kk) * np + nt8 * 8 + nn];
                    }
                }
                gather_fragment(&tile, Role::B, MmaShape::M16N8K16)?
            } else {
                let frag = PackedFragment::from_packed(w, kt, nt16);
                let g0 = (kt * 16) / w.group_size;
                let scales: Vec<Half> = (0..16).map(|c| w.scales[g0 * np + nt16 * 16 + c]).collect();
                let zps: Vec<i32> = (0..16)
                    .map(|c| {
                        if w.zero_point {
                            w.zero_points[g0 * np + nt16 * 16 + c] as i32
                        } else {
                            0
                        }
                    })
                    .collect();
                dequant_fragment(&frag, &scales, &zps, n_half, expected_perm)?
            };
            b_frags.push(b);
        }

        for mt in 0..m_tiles {
            let mut acc = Fragment::<f32>::zeroed(Role::C, MmaShape::M16N8K16);
            for kt in 0..k_tiles {
                acc = mma_emulate(&a_frags[mt * k_tiles + kt], &b_frags[kt], &acc)?;
            }
            let tile = scatter_fragment(&acc)?;
            for r in 0..16 {
                for c in 0..8 {
                    let (gr, gc) = (mt * 16 + r, nt8 * 8 + c);
                    if gr < m && gc < n {
                        out[gr * n + gc] = fp16_round(tile[r * 8 + c]);
                    }
                }
            }
        }
    }

    let schedule = emit_gemm_schedule(k_tiles, p.depth, w.bits != 16);
    Ok((Tensor::from_f16(vec![m, n], out), schedule))
}

/// One pass of the k-tile mainloop: per tile a prefetch, a fused I2F+FMA (in
/// the mixed path) and an MMA, with prefetch gated on the buffer freed
/// `depth` tiles back.
pub fn emit_gemm_schedule(k_tiles: usize, depth: usize, mixed: bool) -> PipelineSchedule {
    let mut s = PipelineSchedule::default();
    let mut mma_of: Vec<usize> = Vec::with_capacity(k_tiles);
    for kt in 0..k_tiles {
        let mut load_deps = Vec::new();
        if kt >= depth {
            load_deps.push(mma_of[kt - depth]);
        }
        let load = s.push(StageKind::Load, kt, load_deps);
        let feed = if mixed {
            s.push(StageKind::I2fFma, kt, vec![load])
        } else {
            load
        };
        let mma = s.push(StageKind::Mma, kt, vec![feed]);
        mma_of.push(mma);
    }
    s
}

/// The oracle side of the path-equivalence theorem.
pub fn oracle_gemm(a: &Tensor, w: &PackedWeights) -> Result<Tensor> {
    reference_gemm(a, &dequantize_unpacked(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packer::{pack_weights, quantize_for_arch, verify_layout};
    use crate::quant::QuantizedTensor;
    use crate::sched::{simulate_with_timeline, UnitLatencies};
    use rand::prelude::*;

    fn h(x: f32) -> Half {
        fp16_round(x)
    }

    fn random_f16(rng: &mut impl Rng, len: usize, lo: f32, hi: f32) -> Vec<Half> {
        (0..len).map(|_| h(rng.random_range(lo..hi))).collect()
    }

    fn pack_random(
        rng: &mut impl Rng,
        k: usize,
        n: usize,
        bits: u8,
        gs: usize,
        zp: bool,
    ) -> PackedWeights {
        let w = Tensor::from_f16(vec![k, n], random_f16(rng, k * n, -2.0, 2.0));
        let arch = ArchProfile::sm80();
        let q = quantize_for_arch(&w, bits, gs, zp, &arch).unwrap();
        pack_weights(&q, &arch).unwrap()
    }

    #[test]
    fn one_by_one() {
        let a = Tensor::from_f16(vec![1, 1], vec![h(2.0)]);
        let w = Tensor::from_f16(vec![1, 1], vec![h(3.0)]);
        let out = reference_gemm(&a, &w).unwrap();
        assert_eq!(out.as_f16()[0], h(6.0));
    }

    #[test]
    fn identity_times_w_is_w() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let k = 16;
        let mut ident = vec![Half::ZERO; k * k];
        for i in 0..k {
            ident[i * k + i] = Half::ONE;
        }
        let a = Tensor::from_f16(vec![k, k], ident);
        let wt = Tensor::from_f16(vec![k, 8], random_f16(&mut rng, k * 8, -4.0, 4.0));
        let out = reference_gemm(&a, &wt).unwrap();
        assert_eq!(out.as_f16(), wt.as_f16());
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let a = Tensor::from_f16(vec![2, 3], vec![Half::ZERO; 6]);
        let w = Tensor::from_f16(vec![4, 2], vec![Half::ZERO; 8]);
        assert!(reference_gemm(&a, &w).is_err());
    }

    #[test]
    fn pass_through_tiled_path_equals_reference() {
        // random 16x32 x 32x8 through the mma-tiled path, bit-exact
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_f16(vec![16, 32], random_f16(&mut rng, 512, -2.0, 2.0));
        let wt = Tensor::from_f16(vec![32, 8], random_f16(&mut rng, 256, -2.0, 2.0));
        let arch = ArchProfile::sm80();
        let packed = pack_weights(&QuantizedTensor::passthrough(wt.clone()), &arch).unwrap();
        let (out, _) = mixed_gemm(
            &GemmProblem {
                activations: a.clone(),
                weights: packed,
                depth: 3,
            },
            &arch,
        )
        .unwrap();
        let want = reference_gemm(&a, &wt).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn all_zero_point_codes_give_zero_output() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let arch = ArchProfile::sm80();
        let w = Tensor::from_f16(vec![64, 32], vec![Half::ZERO; 64 * 32]);
        let q = quantize_for_arch(&w, 4, 64, true, &arch).unwrap();
        let packed = pack_weights(&q, &arch).unwrap();
        let a = Tensor::from_f16(vec![8, 64], random_f16(&mut rng, 512, -2.0, 2.0));
        let (out, _) = mixed_gemm(
            &GemmProblem {
                activations: a,
                weights: packed,
                depth: 3,
            },
            &arch,
        )
        .unwrap();
        for v in out.as_f16() {
            assert_eq!(v.to_bits(), 0);
        }
    }

    #[test]
    fn mixed_path_equals_oracle_u4() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let arch = ArchProfile::sm80();
        for (m, n, k, gs, zp) in [
            (16, 128, 256, 64, true),
            (5, 48, 100, 128, true),
            (32, 64, 64, 64, false),
        ] {
            let packed = pack_random(&mut rng, k, n, 4, gs, zp);
            let a = Tensor::from_f16(vec![m, k], random_f16(&mut rng, m * k, -1.0, 1.0));
            let (out, _) = mixed_gemm(
                &GemmProblem {
                    activations: a.clone(),
                    weights: packed.clone(),
                    depth: 3,
                },
                &arch,
            )
            .unwrap();
            let want = oracle_gemm(&a, &packed).unwrap();
            assert_eq!(out, want, "shape {m}x{n}x{k} gs={gs} zp={zp}");
        }
    }

    #[test]
    fn mixed_path_equals_oracle_i8() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let arch = ArchProfile::sm80();
        for (m, n, k, gs, zp) in [(16, 64, 128, 64, false), (3, 24, 200, 128, true)] {
            let packed = pack_random(&mut rng, k, n, 8, gs, zp);
            let a = Tensor::from_f16(vec![m, k], random_f16(&mut rng, m * k, -1.0, 1.0));
            let (out, _) = mixed_gemm(
                &GemmProblem {
                    activations: a.clone(),
                    weights: packed.clone(),
                    depth: 3,
                },
                &arch,
            )
            .unwrap();
            let want = oracle_gemm(&a, &packed).unwrap();
            assert_eq!(out, want, "shape {m}x{n}x{k} gs={gs} zp={zp}");
        }
    }

    #[test]
    fn dequant_fragment_spot_values() {
        // code 12, scale 0.5, zp 4 -> 4.0 in the matching slot
        let mut words = vec![vec![0u32]; 32];
        // lane 0, slot 0 sits at sub-word position perm[0]
        let perm = solve_subword_permutation(4);
        words[0][0] = 12 << (4 * perm[0]);
        let frag = PackedFragment {
            bits: 4,
            zero_point: true,
            perm_id: perm_rank(&perm),
            lanes: words,
        };
        let scales = vec![h(0.5); 16];
        let zps = vec![4i32; 16];
        let out = dequant_fragment(&frag, &scales, &zps, 0, perm_rank(&perm)).unwrap();
        assert_eq!(out.regs[0][0], h(4.0));
        // all other lanes saw code 0 -> (0 - 4) * 0.5 = -2
        assert_eq!(out.regs[1][0], h(-2.0));
    }

    #[test]
    fn dequant_fragment_all_zp_is_zero() {
        let perm = solve_subword_permutation(4);
        let frag = PackedFragment {
            bits: 4,
            zero_point: true,
            perm_id: perm_rank(&perm),
            lanes: vec![vec![0x5555_5555]; 32],
        };
        let out = dequant_fragment(&frag, &vec![h(0.25); 16], &vec![5; 16], 1, perm_rank(&perm))
            .unwrap();
        for lane in &out.regs {
            for v in lane {
                assert_eq!(v.to_bits(), 0);
            }
        }
    }

    #[test]
    fn dequant_fragment_matches_gather_of_dequantized_tile() {
        // full 16x16 tile: the fragment path equals
        // gather_fragment(dequantize(unpack(tile)))
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let packed = pack_random(&mut rng, 32, 16, 4, 32, true);
        let q = crate::packer::unpack_weights(&packed).unwrap();
        let deq = crate::quant::dequantize(&q);
        let dv = deq.as_f16();
        let (_, np) = packed.padded_dims();
        for kt in 0..2 {
            for n_half in 0..2 {
                let frag = PackedFragment::from_packed(&packed, kt, 0);
                let g0 = (kt * 16) / packed.group_size;
                let scales: Vec<Half> = (0..16).map(|c| packed.scales[g0 * np + c]).collect();
                let zps: Vec<i32> = (0..16)
                    .map(|c| packed.zero_points[g0 * np + c] as i32)
                    .collect();
                let got =
                    dequant_fragment(&frag, &scales, &zps, n_half, packed.perm_id).unwrap();
                let mut tile = vec![Half::ZERO; 128];
                for kk in 0..16 {
                    for nn in 0..8 {
                        tile[kk * 8 + nn] = dv[(kt * 16 + kk) * np + n_half * 8 + nn];
                    }
                }
                let want = gather_fragment(&tile, Role::B, MmaShape::M16N8K16).unwrap();
                assert_eq!(got, want, "kt={kt} n_half={n_half}");
            }
        }
    }

    #[test]
    fn permutation_mismatch_is_an_error() {
        let perm = solve_subword_permutation(4);
        let frag = PackedFragment {
            bits: 4,
            zero_point: true,
            perm_id: 1234,
            lanes: vec![vec![0]; 32],
        };
        assert!(matches!(
            dequant_fragment(&frag, &vec![Half::ONE; 16], &vec![0; 16], 0, perm_rank(&perm)),
            Err(Error::PermutationMismatch { .. })
        ));
    }

    #[test]
    fn arch_mismatch_is_an_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let packed = pack_random(&mut rng, 32, 16, 4, 32, true);
        let a = Tensor::from_f16(vec![1, 32], random_f16(&mut rng, 32, -1.0, 1.0));
        let res = mixed_gemm(
            &GemmProblem {
                activations: a,
                weights: packed,
                depth: 3,
            },
            &ArchProfile::sm90(),
        );
        assert!(matches!(res, Err(Error::ArchMismatch { .. })));
    }

    #[test]
    fn schedule_has_three_records_per_k_tile_and_bounded_prefetch() {
        let k_tiles = 64;
        let depth = 3;
        let s = emit_gemm_schedule(k_tiles, depth, true);
        assert_eq!(s.stage_count(), 3 * k_tiles);
        assert_eq!(s.count_kind(StageKind::Mma), k_tiles);
        assert_eq!(s.count_kind(StageKind::Load), k_tiles);
        assert_eq!(s.count_kind(StageKind::I2fFma), k_tiles);

        // in-flight prefetches never exceed the configured depth
        let (_, timeline) = simulate_with_timeline(&s, &UnitLatencies::default()).unwrap();
        let mut events: Vec<u64> = timeline.iter().map(|t| t.start).collect();
        events.sort_unstable();
        events.dedup();
        for &t in &events {
            let mut in_flight = 0;
            for kt in 0..k_tiles {
                let load = &timeline[3 * kt];
                let mma = &timeline[3 * kt + 2];
                if load.start <= t && mma.end > t {
                    in_flight += 1;
                }
            }
            assert!(in_flight <= depth, "t={t}: {in_flight} > {depth}");
        }
    }

    #[test]
    fn packed_blob_layout_verifies_for_gemm_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let packed = pack_random(&mut rng, 256, 64, 4, 128, true);
        assert!(verify_layout(&packed).unwrap().ok());
    }
}
