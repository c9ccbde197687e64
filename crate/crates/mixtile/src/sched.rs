//! Deterministic cycle-model simulator for software-pipelined tile loops.
//!
//! Three execution units are modeled: the tensor core (MMA), the ALU
//! (register loads, I2F conversion, FMA scale application) and the LD/ST
//! async-copy path (global <-> shared transfers). Each unit executes one
//! stage at a time; a stage starts when its dependencies have completed and
//! its unit is free. Ties break deterministically by tile index, then unit
//! order TC < ALU < LDST, then emission order. Costs are integer cycles; the
//! model makes ratio claims only, never wall-clock claims.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Execution units in dispatch-priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Unit {
    Tc,
    Alu,
    Ldst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    /// Global -> shared prefetch of one tile (cp.async analog).
    Load,
    /// Shared -> register transfer of one tile or micro-tile.
    Lds,
    /// Integer-to-float dequantization of one fragment.
    I2f,
    /// Scale application.
    Fma,
    /// Fused register load + dequantize (the attention micro-tile step).
    LdsI2f,
    /// Fused dequantize + scale (the GEMM per-tile ALU record).
    I2fFma,
    /// One tensor-core tile.
    Mma,
}

impl StageKind {
    pub fn unit(self) -> Unit {
        match self {
            StageKind::Load => Unit::Ldst,
            StageKind::Mma => Unit::Tc,
            _ => Unit::Alu,
        }
    }
}

/// One timed stage record. `tile` groups stages belonging to the same k-tile
/// (GEMM) or macro-tile (attention); `deps` are indices into the schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    pub unit: Unit,
    pub kind: StageKind,
    pub tile: usize,
    pub deps: Vec<usize>,
}

impl Stage {
    pub fn new(kind: StageKind, tile: usize, deps: Vec<usize>) -> Stage {
        Stage {
            unit: kind.unit(),
            kind,
            tile,
            deps,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub stages: Vec<Stage>,
}

impl PipelineSchedule {
    pub fn push(&mut self, kind: StageKind, tile: usize, deps: Vec<usize>) -> usize {
        self.stages.push(Stage::new(kind, tile, deps));
        self.stages.len() - 1
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn count_kind(&self, kind: StageKind) -> usize {
        self.stages.iter().filter(|s| s.kind == kind).count()
    }
}

/// Per-stage cycle costs and the memory pipeline depth (number of tile
/// buffers prefetch may run ahead). Zero costs are allowed so degenerate
/// what-if questions (free I2F) stay expressible.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct UnitLatencies {
    pub load: u64,
    pub lds: u64,
    pub i2f: u64,
    pub mma: u64,
    pub fma: u64,
    pub depth: usize,
}

impl Default for UnitLatencies {
    fn default() -> Self {
        UnitLatencies {
            load: 10,
            lds: 2,
            i2f: 4,
            mma: 8,
            fma: 1,
            depth: 3,
        }
    }
}

impl UnitLatencies {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("pipeline depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cost(&self, kind: StageKind) -> u64 {
        match kind {
            StageKind::Load => self.load,
            StageKind::Lds => self.lds,
            StageKind::I2f => self.i2f,
            StageKind::Fma => self.fma,
            StageKind::LdsI2f => self.lds + self.i2f,
            StageKind::I2fFma => self.i2f + self.fma,
            StageKind::Mma => self.mma,
        }
    }
}

/// Simulation outcome. `bubbles = total - busy` per unit; `serial_cycles` is
/// the no-overlap baseline (the plain sum of every stage cost).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleReport {
    pub total_cycles: u64,
    pub busy_tc: u64,
    pub busy_alu: u64,
    pub busy_ldst: u64,
    pub bubbles_tc: u64,
    pub bubbles_alu: u64,
    pub bubbles_ldst: u64,
    pub stage_count: usize,
    pub serial_cycles: u64,
}

/// Start/end cycle of each stage, in schedule order.
#[derive(Clone, Debug)]
pub struct StageTiming {
    pub start: u64,
    pub end: u64,
}

fn check_acyclic(s: &PipelineSchedule) -> Result<()> {
    let n = s.stages.len();
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (i, st) in s.stages.iter().enumerate() {
        for &d in &st.deps {
            if d >= n {
                return Err(Error::InvalidConfig(format!(
                    "dependency index {d} out of range"
                )));
            }
            succs[d].push(i);
            indeg[i] += 1;
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for &j in &succs[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                queue.push(j);
            }
        }
    }
    if seen != n {
        return Err(Error::CyclicSchedule);
    }
    Ok(())
}

/// List-schedule the stages over the three units and return per-stage
/// timings. Deterministic for identical inputs.
pub fn simulate_with_timeline(
    s: &PipelineSchedule,
    lat: &UnitLatencies,
) -> Result<(CycleReport, Vec<StageTiming>)> {
    lat.validate()?;
    check_acyclic(s)?;
    let n = s.stages.len();
    let mut timing: Vec<Option<StageTiming>> = vec![None; n];
    let mut unit_free = [0u64; 3];
    let mut remaining = n;
    let mut now = 0u64;

    while remaining > 0 {
        let mut progressed = true;
        while progressed {
            progressed = false;
            for unit in [Unit::Tc, Unit::Alu, Unit::Ldst] {
                let u = unit as usize;
                if unit_free[u] > now {
                    continue;
                }
                // lowest tile index first, then emission order
                let mut pick: Option<usize> = None;
                for (i, st) in s.stages.iter().enumerate() {
                    if st.unit != unit || timing[i].is_some() {
                        continue;
                    }
                    let ready = st
                        .deps
                        .iter()
                        .all(|&d| timing[d].as_ref().is_some_and(|t| t.end <= now));
                    if !ready {
                        continue;
                    }
                    match pick {
                        None => pick = Some(i),
                        Some(p) if s.stages[i].tile < s.stages[p].tile => pick = Some(i),
                        _ => {}
                    }
                }
                if let Some(i) = pick {
                    let cost = lat.cost(s.stages[i].kind);
                    timing[i] = Some(StageTiming {
                        start: now,
                        end: now + cost,
                    });
                    unit_free[u] = now + cost;
                    remaining -= 1;
                    progressed = true;
                }
            }
        }
        if remaining > 0 {
            // advance to the next completion or unit-release event
            let next = timing
                .iter()
                .flatten()
                .map(|t| t.end)
                .chain(unit_free.iter().copied())
                .filter(|&t| t > now)
                .min();
            match next {
                Some(t) => now = t,
                None => return Err(Error::CyclicSchedule),
            }
        }
    }

    let timeline: Vec<StageTiming> = timing.into_iter().map(|t| t.unwrap()).collect();
    let total = timeline.iter().map(|t| t.end).max().unwrap_or(0);
    let mut busy = [0u64; 3];
    for (st, t) in s.stages.iter().zip(&timeline) {
        busy[st.unit as usize] += t.end - t.start;
    }
    let serial: u64 = s.stages.iter().map(|st| lat.cost(st.kind)).sum();
    let report = CycleReport {
        total_cycles: total,
        busy_tc: busy[0],
        busy_alu: busy[1],
        busy_ldst: busy[2],
        bubbles_tc: total - busy[0],
        bubbles_alu: total - busy[1],
        bubbles_ldst: total - busy[2],
        stage_count: n,
        serial_cycles: serial,
    };
    Ok((report, timeline))
}

/// List-schedule the stages and report totals. See [`simulate_with_timeline`].
pub fn simulate(s: &PipelineSchedule, lat: &UnitLatencies) -> Result<CycleReport> {
    simulate_with_timeline(s, lat).map(|(r, _)| r)
}

/// Pipelined-vs-baseline comparison: the baseline schedule is the same
/// workload with the dequantization work removed (pure f16 path).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapComparison {
    pub pipelined: CycleReport,
    pub baseline: CycleReport,
    /// mixed stage count / baseline stage count
    pub instr_ratio: f64,
    /// mixed total cycles / baseline total cycles
    pub cycle_ratio: f64,
}

/// Derive the f16 baseline: dequantization stages (I2F, FMA and their fused
/// forms) disappear; fused register loads keep their load half. Dependencies
/// through removed stages are contracted.
pub fn f16_baseline(s: &PipelineSchedule) -> PipelineSchedule {
    let n = s.stages.len();
    let mut keep = vec![true; n];
    let mut replace_kind: Vec<Option<StageKind>> = vec![None; n];
    for (i, st) in s.stages.iter().enumerate() {
        match st.kind {
            StageKind::I2f | StageKind::Fma | StageKind::I2fFma => keep[i] = false,
            StageKind::LdsI2f => replace_kind[i] = Some(StageKind::Lds),
            _ => {}
        }
    }
    // contract deps through removed stages
    fn resolve(i: usize, s: &PipelineSchedule, keep: &[bool], out: &mut Vec<usize>) {
        if keep[i] {
            if !out.contains(&i) {
                out.push(i);
            }
        } else {
            for &d in &s.stages[i].deps {
                resolve(d, s, keep, out);
            }
        }
    }
    let mut new_index = vec![usize::MAX; n];
    let mut next = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            new_index[i] = next;
            next += 1;
        }
    }
    let mut out = PipelineSchedule::default();
    for (i, st) in s.stages.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let mut deps = Vec::new();
        for &d in &st.deps {
            resolve(d, s, &keep, &mut deps);
        }
        let deps = deps.into_iter().map(|d| new_index[d]).collect();
        let kind = replace_kind[i].unwrap_or(st.kind);
        out.stages.push(Stage::new(kind, st.tile, deps));
    }
    out
}

/// Simulate the mixed schedule and its f16 baseline and report stage-count
/// and cycle ratios.
pub fn compare_overlap(mixed: &PipelineSchedule, lat: &UnitLatencies) -> Result<OverlapComparison> {
    let baseline = f16_baseline(mixed);
    let pipelined = simulate(mixed, lat)?;
    let base = simulate(&baseline, lat)?;
    let instr_ratio = pipelined.stage_count as f64 / base.stage_count as f64;
    let cycle_ratio = pipelined.total_cycles as f64 / base.total_cycles as f64;
    Ok(OverlapComparison {
        pipelined,
        baseline: base,
        instr_ratio,
        cycle_ratio,
    })
}

/// Steady-state tensor-core bubble fraction of an attention schedule.
///
/// MMA stages of interior macro-tiles (first and last excluded as fill and
/// drain) define the steady state; the fraction is `1 - mma/period` with the
/// period taken start-to-start. Schedules too short to have an interior are
/// measured over the whole run, so fill and drain show up honestly.
pub fn attention_bubbles(s: &PipelineSchedule, lat: &UnitLatencies) -> Result<f64> {
    let (report, timeline) = simulate_with_timeline(s, lat)?;
    let max_tile = s.stages.iter().map(|st| st.tile).max().unwrap_or(0);
    let mut starts: Vec<u64> = s
        .stages
        .iter()
        .zip(&timeline)
        .filter(|(st, _)| st.kind == StageKind::Mma && st.tile > 0 && st.tile < max_tile)
        .map(|(_, t)| t.start)
        .collect();
    starts.sort_unstable();
    if starts.len() >= 2 {
        let span = starts[starts.len() - 1] - starts[0];
        let period = span as f64 / (starts.len() - 1) as f64;
        if period <= 0.0 {
            return Ok(0.0);
        }
        Ok((1.0 - lat.mma as f64 / period).max(0.0))
    } else {
        // no steady state: report the whole-run TC idle fraction
        if report.total_cycles == 0 {
            return Ok(0.0);
        }
        Ok(report.bubbles_tc as f64 / report.total_cycles as f64)
    }
}
