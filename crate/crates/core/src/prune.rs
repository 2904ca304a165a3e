//! One-step pruning: find the scale threshold that meets a MACs budget, then
//! remove every channel whose normalization scale falls below it.
//!
//! Channels are kept iff `|gamma| >= threshold`, so a threshold of zero is
//! the identity. The pruned cost is a step function of the threshold with
//! breaks exactly at the distinct scale magnitudes, so the search is a
//! binary search over that sorted list rather than over a continuous
//! interval.
//!
//! Prunable norms outside residual blocks (head and tail) never drop below
//! `floor` channels; the floor keeps the largest-magnitude channels. The
//! head's last norm sets the residual stream width, so its mask also
//! resizes every block's input and output channels.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{
    branch_layer_id, head_id, plain_layer_id, tail_id, Block, GeneratorArch, IncResBlock, LayerSpec,
    NormSite, PlainResBlock, Shape,
};
use crate::error::{Error, Result};
use crate::macs::arch_macs;

pub const DEFAULT_FLOOR: usize = 8;

/// Keep-mask per prunable norm layer id.
pub type Masks = BTreeMap<String, Vec<bool>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneBudget {
    pub target_macs: u64,
    pub floor: usize,
    pub input_shape: Shape,
}

impl PruneBudget {
    pub fn new(target_macs: u64, floor: usize, input_shape: Shape) -> Result<Self> {
        if target_macs == 0 {
            return Err(Error::InvalidArgument("target MACs must be positive".into()));
        }
        if floor == 0 {
            return Err(Error::InvalidArgument("floor must be at least 1".into()));
        }
        Ok(PruneBudget {
            target_macs,
            floor,
            input_shape,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub threshold: f32,
    pub target_macs: u64,
    pub achieved_macs: u64,
    pub unpruned_macs: u64,
    pub pruned_channel_count: usize,
    pub removed_branch_count: usize,
    /// The unpruned model already met the budget.
    pub vacuous: bool,
    pub masks: Masks,
    pub arch: GeneratorArch,
}

/// Machine-readable summary written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f32,
    pub target_macs: u64,
    pub achieved_macs: u64,
    pub unpruned_macs: u64,
    pub pruned_channels: usize,
    pub removed_branches: usize,
    pub vacuous: bool,
    pub wall_clock_ms: u64,
}

impl PruneResult {
    pub fn report(&self, wall_clock_ms: u64) -> PruneReport {
        PruneReport {
            threshold: self.threshold,
            target_macs: self.target_macs,
            achieved_macs: self.achieved_macs,
            unpruned_macs: self.unpruned_macs,
            pruned_channels: self.pruned_channel_count,
            removed_branches: self.removed_branch_count,
            vacuous: self.vacuous,
            wall_clock_ms,
        }
    }
}

/// Input and output channel indices (into the unpruned layer) that survive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerKeep {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

pub type ChannelPlan = BTreeMap<String, LayerKeep>;

/// Ascending distinct `|gamma|` over all prunable norms, with 0 first.
pub fn collect_scales(arch: &GeneratorArch) -> Result<Vec<f32>> {
    let norms = arch.prunable_norms();
    let mut scales: Vec<f32> = norms
        .iter()
        .flat_map(|(_, n)| n.gamma.iter().map(|g| g.abs()))
        .collect();
    if scales.is_empty() {
        return Err(Error::NoPrunableNorms);
    }
    scales.push(0.0);
    scales.sort_by(f32::total_cmp);
    scales.dedup();
    Ok(scales)
}

/// Candidate thresholds in ascending order: the collected scales plus one
/// value just above the largest, which removes every prunable channel.
pub fn candidate_thresholds(arch: &GeneratorArch) -> Result<Vec<f32>> {
    let mut c = collect_scales(arch)?;
    let max = *c.last().expect("non-empty");
    c.push(max.next_up());
    Ok(c)
}

/// Keep-masks for threshold `tau`, with the floor applied to head/tail norms.
pub fn threshold_masks(arch: &GeneratorArch, tau: f32, floor: usize) -> Masks {
    arch.prunable_norms()
        .into_iter()
        .map(|(id, norm)| {
            let mut keep: Vec<bool> = norm.gamma.iter().map(|g| g.abs() >= tau).collect();
            if norm.site == NormSite::Outer {
                let min_keep = floor.min(keep.len());
                if keep.iter().filter(|&&k| k).count() < min_keep {
                    keep = top_k_mask(norm.gamma, min_keep);
                }
            }
            (id, keep)
        })
        .collect()
}

/// Mask of the `k` largest-|gamma| channels; ties go to the lower index.
fn top_k_mask(gamma: &[f32], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..gamma.len()).collect();
    order.sort_by(|&a, &b| gamma[b].abs().total_cmp(&gamma[a].abs()).then(a.cmp(&b)));
    let mut keep = vec![false; gamma.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

fn kept(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

fn select(v: &[f32], idx: &[usize]) -> Vec<f32> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Rewrites one layer sequence given surviving input channels. The last
/// convolution's outputs are forced to `final_out` when given (residual
/// bodies must hand back the stream width).
fn plan_sequence(
    layers: &[LayerSpec],
    id: &dyn Fn(usize) -> String,
    mut cur: Vec<usize>,
    masks: &Masks,
    final_out: Option<&[usize]>,
    plan: &mut ChannelPlan,
) -> (Vec<LayerSpec>, Vec<usize>) {
    let last_conv = layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::TransposedConv { .. }));
    let mut out_layers = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let lid = id(i);
        let input = cur.clone();
        let new = match layer {
            LayerSpec::Conv { out_ch, .. } | LayerSpec::TransposedConv { out_ch, .. } => {
                let next_mask = match layers.get(i + 1) {
                    Some(LayerSpec::Norm { .. }) => masks.get(&id(i + 1)),
                    _ => None,
                };
                cur = match (next_mask, final_out) {
                    (Some(m), _) => kept(m),
                    (None, Some(f)) if Some(i) == last_conv => f.to_vec(),
                    _ => (0..*out_ch).collect(),
                };
                let mut l = layer.clone();
                match &mut l {
                    LayerSpec::Conv { in_ch, out_ch, .. } | LayerSpec::TransposedConv { in_ch, out_ch, .. } => {
                        *in_ch = input.len();
                        *out_ch = cur.len();
                    }
                    _ => unreachable!(),
                }
                l
            }
            LayerSpec::DepthwiseConv {
                kernel,
                stride,
                pad_mode,
                ..
            } => LayerSpec::DepthwiseConv {
                kernel: *kernel,
                channels: cur.len(),
                stride: *stride,
                pad_mode: *pad_mode,
            },
            LayerSpec::Norm {
                norm_type,
                gamma,
                beta,
                tracks_running_stats,
                prunable,
                ..
            } => LayerSpec::Norm {
                norm_type: *norm_type,
                channels: cur.len(),
                gamma: select(gamma, &cur),
                beta: select(beta, &cur),
                tracks_running_stats: *tracks_running_stats,
                prunable: *prunable,
            },
            LayerSpec::Activation { .. } | LayerSpec::ResidualAdd => layer.clone(),
        };
        plan.insert(
            lid,
            LayerKeep {
                input,
                output: cur.clone(),
            },
        );
        out_layers.push(new);
    }
    (out_layers, cur)
}

/// Applies keep-masks, returning the pruned architecture and, for every
/// layer, which original channels survive.
pub fn apply_masks(arch: &GeneratorArch, masks: &Masks) -> (GeneratorArch, ChannelPlan) {
    let mut plan = ChannelPlan::new();
    let input: Vec<usize> = (0..arch.input().c).collect();
    let (head, stream) = plan_sequence(&arch.head, &head_id, input, masks, None, &mut plan);
    let mut blocks = Vec::with_capacity(arch.blocks.len());
    for (b, block) in arch.blocks.iter().enumerate() {
        let new = match block {
            Block::IncRes(inc) => {
                let branches = inc
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(j, br)| {
                        let id = move |i| branch_layer_id(b, j, i);
                        let (layers, _) =
                            plan_sequence(&br.layers, &id, stream.clone(), masks, Some(&stream), &mut plan);
                        let mid_ch = match &layers[0] {
                            LayerSpec::Conv { out_ch, .. } => *out_ch,
                            _ => br.mid_ch,
                        };
                        crate::arch::Branch {
                            op: br.op,
                            kernel: br.kernel,
                            mid_ch,
                            alive: br.alive && mid_ch > 0,
                            layers,
                        }
                    })
                    .collect();
                Block::IncRes(IncResBlock {
                    channels: stream.len(),
                    branches,
                })
            }
            Block::Plain(p) => {
                let id = move |i| plain_layer_id(b, i);
                let (layers, _) = plan_sequence(&p.layers, &id, stream.clone(), masks, Some(&stream), &mut plan);
                Block::Plain(PlainResBlock {
                    channels: stream.len(),
                    layers,
                })
            }
        };
        blocks.push(new);
    }
    let (tail, _) = plan_sequence(&arch.tail, &tail_id, stream.clone(), masks, None, &mut plan);
    let pruned = GeneratorArch {
        format_version: arch.format_version,
        name: arch.name.clone(),
        input_shape: arch.input_shape,
        head,
        blocks,
        tail,
    };
    (pruned, plan)
}

/// Channel plan for a threshold, without counting as an application.
pub fn channel_plan(arch: &GeneratorArch, masks: &Masks) -> ChannelPlan {
    apply_masks(arch, masks).1
}

thread_local! {
    static APPLY_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`apply_threshold`] calls made on this thread so far.
pub fn apply_threshold_calls() -> u64 {
    APPLY_CALLS.with(Cell::get)
}

/// Prunes every channel with `|gamma| < tau` and propagates the removal to
/// the neighbouring convolutions. Branches left with no channels are marked
/// dead.
pub fn apply_threshold(arch: &GeneratorArch, tau: f32, floor: usize) -> (GeneratorArch, Masks) {
    APPLY_CALLS.with(|c| c.set(c.get() + 1));
    let masks = threshold_masks(arch, tau, floor);
    let (pruned, _) = apply_masks(arch, &masks);
    (pruned, masks)
}

/// MACs of the model pruned at `tau`.
pub fn pruned_macs(arch: &GeneratorArch, tau: f32, floor: usize, input: Shape) -> Result<u64> {
    let masks = threshold_masks(arch, tau, floor);
    let (pruned, _) = apply_masks(arch, &masks);
    Ok(arch_macs(&pruned, input)?.total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSearch {
    pub threshold: f32,
    /// Threshold zero already met the budget.
    pub vacuous: bool,
    /// Number of candidate thresholds whose cost was evaluated.
    pub evaluations: usize,
}

/// Smallest candidate threshold whose pruned model fits the budget.
///
/// Binary search over the sorted candidates: a model under budget means the
/// threshold may be lowered, one over budget means it must be raised.
pub fn search_threshold(arch: &GeneratorArch, budget: &PruneBudget) -> Result<ThresholdSearch> {
    let cands = candidate_thresholds(arch)?;
    let mut evaluations = 0;
    let mut fits = |tau: f32| -> Result<bool> {
        evaluations += 1;
        Ok(pruned_macs(arch, tau, budget.floor, budget.input_shape)? <= budget.target_macs)
    };
    if fits(0.0)? {
        return Ok(ThresholdSearch {
            threshold: 0.0,
            vacuous: true,
            evaluations,
        });
    }
    let last = cands.len() - 1;
    if !fits(cands[last])? {
        let minimum = pruned_macs(arch, cands[last], budget.floor, budget.input_shape)?;
        return Err(Error::BudgetInfeasible {
            target: budget.target_macs,
            minimum,
        });
    }
    // cands[lo] over budget, cands[hi] within budget
    let (mut lo, mut hi) = (0usize, last);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(cands[mid])? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ThresholdSearch {
        threshold: cands[hi],
        vacuous: false,
        evaluations,
    })
}

/// Search the threshold for `budget`, then prune once.
pub fn prune(arch: &GeneratorArch, budget: &PruneBudget) -> Result<PruneResult> {
    if let Err(errs) = arch.validate() {
        return Err(Error::Invalid(errs));
    }
    let unpruned_macs = arch_macs(arch, budget.input_shape)?.total;
    let search = search_threshold(arch, budget)?;
    let (pruned, masks) = apply_threshold(arch, search.threshold, budget.floor);
    let achieved_macs = arch_macs(&pruned, budget.input_shape)?.total;
    debug_assert!(achieved_macs <= budget.target_macs);
    let pruned_channel_count = masks.values().flatten().filter(|&&k| !k).count();
    let removed_branch_count = count_alive(arch) - count_alive(&pruned);
    Ok(PruneResult {
        threshold: search.threshold,
        target_macs: budget.target_macs,
        achieved_macs,
        unpruned_macs,
        pruned_channel_count,
        removed_branch_count,
        vacuous: search.vacuous,
        masks,
        arch: pruned,
    })
}

fn count_alive(arch: &GeneratorArch) -> usize {
    arch.blocks
        .iter()
        .map(|b| match b {
            Block::IncRes(inc) => inc.alive_branches(),
            Block::Plain(_) => 0,
        })
        .sum()
}
