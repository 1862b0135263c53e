//! 1F1B pipeline schedules (plain and interleaved) and the ordering pass
//! that makes their point-to-point exchanges safe under rendezvous
//! semantics.
//!
//! A PP boundary transfer is a matched send/recv pair; both endpoints must
//! issue the pair's transfers in the same relative order or two ranks can
//! sit in different exchanges waiting for each other. The upstream stage's
//! naive emission order (send after the producing compute, recv before the
//! consuming one) is used as the common order of each boundary, and every
//! rank interleaves its boundary operations with its compute sequence in
//! exactly that order.

use std::collections::{HashSet, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) enum Dir {
    Fwd,
    Bwd,
}

/// One compute span: direction, virtual-stage chunk, microbatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct Unit {
    pub dir: Dir,
    pub chunk: u32,
    pub mb: u32,
}

/// A PP boundary transfer. `Fwd` carries the activation into logical stage
/// `logical`; `Bwd` carries the gradient out of logical stage `logical`
/// down to `logical - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct TransferKey {
    pub dir: Dir,
    pub logical: u32,
    pub mb: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Step {
    Compute(Unit),
    P2p { key: TransferKey, sending: bool },
}

#[derive(Debug, thiserror::Error)]
pub(crate) enum ScheduleError {
    #[error("interleaved schedule requires ga to be a multiple of pp")]
    GaNotMultipleOfPp,
    #[error("ga {ga} too small to drive vpp={vpp} x pp={pp} interleaving")]
    GaTooSmall { ga: u32, vpp: u32, pp: u32 },
    #[error("internal: boundary order infeasible at stage {stage}")]
    Infeasible { stage: u32 },
}

pub(crate) struct PipelineLayout {
    pub pp: u32,
    pub vpp: u32, // 0 or 1 means no interleaving
    pub ga: u32,
}

impl PipelineLayout {
    pub fn chunks(&self) -> u32 {
        self.vpp.max(1)
    }

    pub fn total_stages(&self) -> u32 {
        self.pp * self.chunks()
    }

    pub fn logical(&self, stage: u32, chunk: u32) -> u32 {
        stage + chunk * self.pp
    }

    fn interleaved(&self) -> bool {
        self.vpp > 1 && self.pp > 1
    }
}

/// Compute-unit order of one pipeline stage.
pub(crate) fn unit_sequence(layout: &PipelineLayout, stage: u32) -> Result<Vec<Unit>, ScheduleError> {
    let pp = layout.pp;
    let ga = layout.ga;
    if !layout.interleaved() {
        // Plain 1F1B: warmup forwards, steady one-forward-one-backward,
        // backward cooldown.
        let warmup = (pp - 1 - stage).min(ga);
        let mut units = Vec::with_capacity(2 * ga as usize);
        for m in 0..warmup {
            units.push(Unit { dir: Dir::Fwd, chunk: 0, mb: m });
        }
        for k in 0..(ga - warmup) {
            units.push(Unit { dir: Dir::Fwd, chunk: 0, mb: warmup + k });
            units.push(Unit { dir: Dir::Bwd, chunk: 0, mb: k });
        }
        for i in (ga - warmup)..ga {
            units.push(Unit { dir: Dir::Bwd, chunk: 0, mb: i });
        }
        return Ok(units);
    }

    let vpp = layout.vpp;
    if ga < vpp * pp {
        return Err(ScheduleError::GaTooSmall { ga, vpp, pp });
    }
    if ga % pp != 0 {
        return Err(ScheduleError::GaNotMultipleOfPp);
    }
    let total = ga * vpp;
    let warmup = ((pp - stage - 1) * 2 + (vpp - 1) * pp).min(total);
    let fwd_unit = |u: u32| {
        let group = u / (pp * vpp);
        let within = u % (pp * vpp);
        Unit {
            dir: Dir::Fwd,
            chunk: within / pp,
            mb: group * pp + within % pp,
        }
    };
    let bwd_unit = |u: u32| {
        let group = u / (pp * vpp);
        let within = u % (pp * vpp);
        Unit {
            dir: Dir::Bwd,
            chunk: vpp - 1 - within / pp,
            mb: group * pp + within % pp,
        }
    };
    let mut units = Vec::with_capacity(2 * total as usize);
    for u in 0..warmup {
        units.push(fwd_unit(u));
    }
    for k in 0..(total - warmup) {
        units.push(fwd_unit(warmup + k));
        units.push(bwd_unit(k));
    }
    for u in (total - warmup)..total {
        units.push(bwd_unit(u));
    }
    Ok(units)
}

fn src_pos(layout: &PipelineLayout, key: &TransferKey) -> u32 {
    match key.dir {
        Dir::Fwd => (key.logical + layout.pp - 1) % layout.pp,
        Dir::Bwd => key.logical % layout.pp,
    }
}

fn dst_pos(layout: &PipelineLayout, key: &TransferKey) -> u32 {
    match key.dir {
        Dir::Fwd => key.logical % layout.pp,
        Dir::Bwd => (key.logical + layout.pp - 1) % layout.pp,
    }
}

/// Boundary index a transfer crosses; boundary `b` sits between pipeline
/// positions `b` and `(b + 1) % pp`.
fn pair_of(layout: &PipelineLayout, key: &TransferKey) -> u32 {
    (key.logical + layout.pp - 1) % layout.pp
}

fn is_cross_rank(layout: &PipelineLayout, key: &TransferKey) -> bool {
    src_pos(layout, key) != dst_pos(layout, key)
}

/// Unit that produces the payload of a transfer.
fn producer_unit(layout: &PipelineLayout, key: &TransferKey) -> Unit {
    match key.dir {
        Dir::Fwd => Unit {
            dir: Dir::Fwd,
            chunk: (key.logical - 1) / layout.pp,
            mb: key.mb,
        },
        Dir::Bwd => Unit {
            dir: Dir::Bwd,
            chunk: key.logical / layout.pp,
            mb: key.mb,
        },
    }
}

/// Transfers a unit consumes (recv side) and emits (send side), in naive
/// per-unit order.
fn unit_transfers(layout: &PipelineLayout, stage: u32, unit: &Unit) -> (Option<TransferKey>, Option<TransferKey>) {
    let logical = layout.logical(stage, unit.chunk);
    let last = layout.total_stages() - 1;
    match unit.dir {
        Dir::Fwd => {
            let input = (logical > 0)
                .then(|| TransferKey { dir: Dir::Fwd, logical, mb: unit.mb })
                .filter(|k| is_cross_rank(layout, k));
            let output = (logical < last)
                .then(|| TransferKey { dir: Dir::Fwd, logical: logical + 1, mb: unit.mb })
                .filter(|k| is_cross_rank(layout, k));
            (input, output)
        }
        Dir::Bwd => {
            let input = (logical < last)
                .then(|| TransferKey { dir: Dir::Bwd, logical: logical + 1, mb: unit.mb })
                .filter(|k| is_cross_rank(layout, k));
            let output = (logical > 0)
                .then(|| TransferKey { dir: Dir::Bwd, logical, mb: unit.mb })
                .filter(|k| is_cross_rank(layout, k));
            (input, output)
        }
    }
}

/// Common per-boundary transfer order: the upstream endpoint's naive
/// emission order (upstream = the boundary's forward-direction sender, which
/// sends the activations and receives the gradients crossing it).
fn boundary_orders(layout: &PipelineLayout, units: &[Vec<Unit>]) -> Vec<Vec<TransferKey>> {
    let pp = layout.pp as usize;
    let mut orders: Vec<Vec<TransferKey>> = vec![Vec::new(); pp];
    for stage in 0..layout.pp {
        for unit in &units[stage as usize] {
            let (input, output) = unit_transfers(layout, stage, unit);
            // Naive order at this rank: recv, compute, send.
            for key in [input, output].into_iter().flatten() {
                if pair_of(layout, &key) == stage {
                    orders[stage as usize].push(key);
                }
            }
        }
    }
    orders
}

/// Full per-stage step lists with boundary operations emitted in the
/// common order of each boundary.
pub(crate) fn build_pipeline_steps(layout: &PipelineLayout) -> Result<Vec<Vec<Step>>, ScheduleError> {
    let pp = layout.pp as usize;
    let mut units = Vec::with_capacity(pp);
    for stage in 0..layout.pp {
        units.push(unit_sequence(layout, stage)?);
    }
    let orders = boundary_orders(layout, &units);

    let mut out = Vec::with_capacity(pp);
    for stage in 0..layout.pp {
        out.push(merge_stage(layout, stage, &units[stage as usize], &orders)?);
    }
    Ok(out)
}

fn merge_stage(
    layout: &PipelineLayout,
    stage: u32,
    units: &[Unit],
    orders: &[Vec<TransferKey>],
) -> Result<Vec<Step>, ScheduleError> {
    // Queues over the (at most two) boundaries this rank touches.
    let mut queues: Vec<(u32, VecDeque<TransferKey>)> = Vec::new();
    for (pair, order) in orders.iter().enumerate() {
        let keys: VecDeque<TransferKey> = order
            .iter()
            .filter(|k| src_pos(layout, k) == stage || dst_pos(layout, k) == stage)
            .copied()
            .collect();
        if !keys.is_empty() {
            queues.push((pair as u32, keys));
        }
    }

    let mut emitted: HashSet<Unit> = HashSet::new();
    let mut steps: Vec<Step> = Vec::new();

    // Emit every send whose producing compute has already been emitted, as
    // soon as its boundary order allows.
    fn drain(
        layout: &PipelineLayout,
        stage: u32,
        queues: &mut [(u32, VecDeque<TransferKey>)],
        emitted: &HashSet<Unit>,
        steps: &mut Vec<Step>,
    ) {
        loop {
            let mut progressed = false;
            for (_, q) in queues.iter_mut() {
                while let Some(&front) = q.front() {
                    let sending = src_pos(layout, &front) == stage;
                    if sending && emitted.contains(&producer_unit(layout, &front)) {
                        steps.push(Step::P2p { key: front, sending: true });
                        q.pop_front();
                        progressed = true;
                    } else {
                        break;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
    }

    for unit in units {
        let (input, _) = unit_transfers(layout, stage, unit);
        if let Some(want) = input {
            let pair = pair_of(layout, &want);
            let q = queues
                .iter_mut()
                .find(|(p, _)| *p == pair)
                .map(|(_, q)| q)
                .ok_or(ScheduleError::Infeasible { stage })?;
            loop {
                let front = *q.front().ok_or(ScheduleError::Infeasible { stage })?;
                q.pop_front();
                let sending = src_pos(layout, &front) == stage;
                if sending {
                    if !emitted.contains(&producer_unit(layout, &front)) {
                        return Err(ScheduleError::Infeasible { stage });
                    }
                    steps.push(Step::P2p { key: front, sending: true });
                } else {
                    steps.push(Step::P2p { key: front, sending: false });
                }
                if front == want {
                    break;
                }
            }
            drain(layout, stage, &mut queues, &emitted, &mut steps);
        }
        steps.push(Step::Compute(*unit));
        emitted.insert(*unit);
        drain(layout, stage, &mut queues, &emitted, &mut steps);
    }
    drain(layout, stage, &mut queues, &emitted, &mut steps);
    for (_, q) in &queues {
        if !q.is_empty() {
            return Err(ScheduleError::Infeasible { stage });
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn computes(steps: &[Step]) -> Vec<(Dir, u32, u32)> {
        steps
            .iter()
            .filter_map(|s| match s {
                Step::Compute(u) => Some((u.dir, u.chunk, u.mb)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn plain_1f1b_pp2_ga2_matches_hand_schedule() {
        let layout = PipelineLayout { pp: 2, vpp: 0, ga: 2 };
        let steps = build_pipeline_steps(&layout).unwrap();
        // Stage 0: F1, F2, B1, B2; stage 1: F1, B1, F2, B2 (1-based).
        assert_eq!(
            computes(&steps[0]),
            vec![
                (Dir::Fwd, 0, 0),
                (Dir::Fwd, 0, 1),
                (Dir::Bwd, 0, 0),
                (Dir::Bwd, 0, 1)
            ]
        );
        assert_eq!(
            computes(&steps[1]),
            vec![
                (Dir::Fwd, 0, 0),
                (Dir::Bwd, 0, 0),
                (Dir::Fwd, 0, 1),
                (Dir::Bwd, 0, 1)
            ]
        );
    }

    /// Both endpoints of every boundary must emit the boundary's transfers
    /// in the same order, otherwise rendezvous execution can deadlock.
    fn assert_pairwise_consistent(layout: &PipelineLayout) {
        let steps = build_pipeline_steps(layout).unwrap();
        for pair in 0..layout.pp {
            let mut per_stage: Vec<Vec<TransferKey>> = Vec::new();
            for stage in 0..layout.pp {
                let seq: Vec<TransferKey> = steps[stage as usize]
                    .iter()
                    .filter_map(|s| match s {
                        Step::P2p { key, .. } if pair_of(layout, key) == pair => Some(*key),
                        _ => None,
                    })
                    .collect();
                if !seq.is_empty() {
                    per_stage.push(seq);
                }
            }
            if per_stage.len() == 2 {
                assert_eq!(per_stage[0], per_stage[1], "boundary {pair} order differs");
            }
        }
    }

    #[test]
    fn boundary_orders_consistent_plain() {
        for (pp, ga) in [(2u32, 2u32), (2, 4), (4, 8), (4, 3), (8, 16), (16, 32)] {
            assert_pairwise_consistent(&PipelineLayout { pp, vpp: 0, ga });
        }
    }

    #[test]
    fn boundary_orders_consistent_interleaved() {
        for (pp, vpp, ga) in [(2u32, 2u32, 4u32), (4, 2, 16), (2, 3, 6), (4, 2, 8)] {
            assert_pairwise_consistent(&PipelineLayout { pp, vpp, ga });
        }
    }

    #[test]
    fn interleaved_compute_count() {
        let layout = PipelineLayout { pp: 4, vpp: 2, ga: 16 };
        let steps = build_pipeline_steps(&layout).unwrap();
        for stage_steps in &steps {
            // ga * vpp forwards plus as many backwards.
            assert_eq!(computes(stage_steps).len(), 2 * 16 * 2);
        }
    }

    #[test]
    fn ga_too_small_rejected() {
        let layout = PipelineLayout { pp: 4, vpp: 2, ga: 4 };
        assert!(matches!(
            unit_sequence(&layout, 0),
            Err(ScheduleError::GaTooSmall { .. })
        ));
    }
}
