//! Structured magnitude pruning.
//!
//! Every hidden unit is scored by the L2 norm of its incoming slice. Removing a
//! unit deletes its weight row (or filter) and bias, its BatchNorm channel, and
//! the columns (or input channels) of the next layer that read it. The result
//! is a genuinely smaller network; surviving values are copied bit for bit.

use std::borrow::Cow;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, Network, UnitView};
use crate::tensor::{row_l2_norms, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PruneGroup {
    pub unit: UnitView,
    pub norm: f32,
    /// Ensemble member that contributed the unit, when the network is a concatenation.
    pub origin_member: Option<usize>,
    pub origin_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// Remove `floor(s·N)` units per layer (at least one unit survives).
    Sparsity(f32),
    /// Exact number of surviving units per hidden layer.
    KeepCounts(Vec<usize>),
    /// `quota[layer][member]`: survivors drawn from each member's own units.
    PerMemberQuota(Vec<Vec<usize>>),
}

/// Units kept out of `n` at sparsity `s`: `n - floor(s·n)`, at least 1.
///
/// Products within `n·1e-6` of an integer snap to it, so `(1 - 1/k)·k·w`
/// gives exactly `(k - 1)·w` despite `f32` rounding in `1 - 1/k`.
pub fn keep_count(n: usize, sparsity: f32) -> usize {
    let x = sparsity as f64 * n as f64;
    let tol = 1e-6 * n.max(1) as f64;
    let removed = if (x - x.round()).abs() < tol { x.round() } else { x.floor() };
    n.saturating_sub(removed as usize).max(1)
}

/// Per hidden layer, every unit with its norm and provenance.
pub fn build_prune_groups(net: &Network, include_bias: bool) -> Result<Vec<Vec<PruneGroup>>> {
    let hidden = net.hidden_layers();
    let mut out: Vec<Vec<PruneGroup>> = Vec::with_capacity(hidden.len());
    let mut views = net.unit_views().into_iter().peekable();
    for (h, hl) in hidden.iter().enumerate() {
        let layer = &net.layers()[hl.layer];
        let consumer_width = match net.layers()[hl.next].spec {
            LayerSpec::Linear { in_features, .. } => in_features,
            LayerSpec::Conv2d { in_channels, .. } => in_channels,
            _ => 0,
        };
        if consumer_width != hl.units * hl.cols_per_unit {
            return Err(Error::UnsupportedTopology(format!(
                "layer {} feeds {consumer_width} inputs from {} units",
                hl.layer, hl.units
            )));
        }
        let norms = row_l2_norms(&layer.params[0], Some(&layer.params[1]), include_bias)?;
        let mut groups = Vec::with_capacity(hl.units);
        for u in 0..hl.units {
            let unit = views.next().expect("one view per hidden unit");
            debug_assert_eq!((unit.layer_index, unit.unit_index), (hl.layer, u));
            let origin = net.unit_origin(h, u);
            groups.push(PruneGroup {
                unit,
                norm: norms.data()[u],
                origin_member: net.origins().map(|_| origin.member),
                origin_index: origin.index,
            });
        }
        out.push(groups);
    }
    Ok(out)
}

/// Ranking order: larger norm first, then lower member, then lower index.
pub fn rank_cmp(a: &PruneGroup, b: &PruneGroup) -> Ordering {
    b.norm
        .total_cmp(&a.norm)
        .then(a.origin_member.unwrap_or(0).cmp(&b.origin_member.unwrap_or(0)))
        .then(a.origin_index.cmp(&b.origin_index))
}

/// Positions of the `keep` best-ranked groups, in ascending position order.
fn top_units(groups: &[&PruneGroup], keep: usize) -> Vec<usize> {
    let mut ranked: Vec<&PruneGroup> = groups.to_vec();
    ranked.sort_by(|a, b| rank_cmp(a, b));
    let mut kept: Vec<usize> = ranked[..keep].iter().map(|g| g.unit.unit_index).collect();
    kept.sort_unstable();
    kept
}

/// Surviving unit indices per hidden layer under `policy`.
pub fn kept_units(net: &Network, policy: &KeepPolicy, include_bias: bool) -> Result<Vec<Vec<usize>>> {
    let groups = build_prune_groups(net, include_bias)?;
    let check_len = |len: usize| {
        if len != groups.len() {
            Err(Error::InvalidArg(format!(
                "policy lists {len} layers, network has {} hidden layers",
                groups.len()
            )))
        } else {
            Ok(())
        }
    };
    match policy {
        KeepPolicy::Sparsity(s) => {
            if !(0.0..1.0).contains(s) {
                return Err(Error::InvalidArg(format!("sparsity must lie in [0, 1), got {s}")));
            }
            Ok(groups
                .iter()
                .map(|g| top_units(&g.iter().collect::<Vec<_>>(), keep_count(g.len(), *s)))
                .collect())
        }
        KeepPolicy::KeepCounts(counts) => {
            check_len(counts.len())?;
            groups
                .iter()
                .zip(counts)
                .enumerate()
                .map(|(h, (g, &c))| {
                    if c == 0 {
                        return Err(Error::EmptyLayer { layer: g[0].unit.layer_index });
                    }
                    if c > g.len() {
                        return Err(Error::InvalidArg(format!(
                            "hidden layer {h} has {} units, cannot keep {c}",
                            g.len()
                        )));
                    }
                    Ok(top_units(&g.iter().collect::<Vec<_>>(), c))
                })
                .collect()
        }
        KeepPolicy::PerMemberQuota(quotas) => {
            check_len(quotas.len())?;
            groups
                .iter()
                .zip(quotas)
                .map(|(g, quota)| {
                    if quota.iter().sum::<usize>() == 0 {
                        return Err(Error::EmptyLayer { layer: g[0].unit.layer_index });
                    }
                    let mut kept = Vec::new();
                    for (member, &q) in quota.iter().enumerate() {
                        let own: Vec<&PruneGroup> =
                            g.iter().filter(|u| u.origin_member.unwrap_or(0) == member).collect();
                        if q > own.len() {
                            return Err(Error::InvalidArg(format!(
                                "member {member} contributes {} units, quota {q}",
                                own.len()
                            )));
                        }
                        kept.extend(top_units(&own, q));
                    }
                    kept.sort_unstable();
                    Ok(kept)
                })
                .collect()
        }
    }
}

pub fn magnitude_prune(net: &Network, policy: &KeepPolicy) -> Result<Network> {
    magnitude_prune_with(net, policy, true)
}

pub fn magnitude_prune_with(net: &Network, policy: &KeepPolicy, include_bias: bool) -> Result<Network> {
    let kept = kept_units(net, policy, include_bias)?;
    select_units(net, &kept)
}

/// Gathers `idx` along axis 1 of `t` viewed as `[outer, groups, inner]`.
fn gather_axis1(t: &Tensor, groups: usize, idx: &[usize]) -> Tensor {
    let outer = t.shape()[0];
    let inner = t.len() / (outer * groups);
    let mut data = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        let row = t.row(o);
        for &g in idx {
            data.extend_from_slice(&row[g * inner..(g + 1) * inner]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[1] = shape[1] / groups * idx.len();
    Tensor::from_parts(shape, data)
}

/// Rebuilds `net` keeping, per hidden layer, the listed units in the listed
/// order. Duplicate-free index lists of any order are accepted, so this also
/// permutes units.
pub fn select_units(net: &Network, kept: &[Vec<usize>]) -> Result<Network> {
    let hidden = net.hidden_layers();
    if kept.len() != hidden.len() {
        return Err(Error::InvalidArg(format!(
            "{} index lists for {} hidden layers",
            kept.len(),
            hidden.len()
        )));
    }
    let mut producer_of = vec![None; net.layers().len()];
    let mut consumer_of = vec![None; net.layers().len()];
    let mut bn_of = vec![None; net.layers().len()];
    for (h, (hl, idx)) in hidden.iter().zip(kept).enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyLayer { layer: hl.layer });
        }
        let mut seen = vec![false; hl.units];
        for &u in idx {
            if u >= hl.units || std::mem::replace(&mut seen[u], true) {
                return Err(Error::InvalidArg(format!("bad unit list for layer {}: {idx:?}", hl.layer)));
            }
        }
        producer_of[hl.layer] = Some(h);
        consumer_of[hl.next] = Some(h);
        for &b in &hl.bn_layers {
            bn_of[b] = Some(h);
        }
    }
    // Layers are rebuilt one at a time so the input is never copied wholesale.
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers().len());
    for (li, layer) in net.layers().iter().enumerate() {
        let mut spec = layer.spec;
        let rebuilt = if let Some(h) = bn_of[li] {
            let idx = &kept[h];
            spec = LayerSpec::BatchNorm2d { channels: idx.len() };
            Layer {
                spec,
                params: layer.params.iter().map(|p| p.select_rows(idx)).collect(),
                buffers: layer.buffers.iter().map(|p| p.select_rows(idx)).collect(),
            }
        } else if producer_of[li].is_some() || consumer_of[li].is_some() {
            let mut w = Cow::Borrowed(&layer.params[0]);
            let mut b = Cow::Borrowed(&layer.params[1]);
            if let Some(h) = consumer_of[li] {
                let (hl, idx) = (&hidden[h], &kept[h]);
                w = Cow::Owned(gather_axis1(&w, hl.units, idx));
                match &mut spec {
                    LayerSpec::Linear { in_features, .. } => *in_features = idx.len() * hl.cols_per_unit,
                    LayerSpec::Conv2d { in_channels, .. } => *in_channels = idx.len(),
                    _ => unreachable!("consumers are Linear or Conv2d"),
                }
            }
            if let Some(h) = producer_of[li] {
                let idx = &kept[h];
                w = Cow::Owned(w.select_rows(idx));
                b = Cow::Owned(b.select_rows(idx));
                match &mut spec {
                    LayerSpec::Linear { out_features, .. } => *out_features = idx.len(),
                    LayerSpec::Conv2d { out_channels, .. } => *out_channels = idx.len(),
                    _ => unreachable!("hidden layers are Linear or Conv2d"),
                }
            }
            Layer { spec, params: vec![w.into_owned(), b.into_owned()], buffers: vec![] }
        } else {
            layer.clone()
        };
        layers.push(rebuilt);
    }
    let origins = net.origins().map(|o| {
        o.iter()
            .zip(kept)
            .map(|(layer, idx)| idx.iter().map(|&u| layer[u]).collect())
            .collect()
    });
    Ok(Network::from_parts_unchecked(net.input_shape().to_vec(), layers, origins))
}

/// Hidden widths (units per hidden layer).
pub fn hidden_widths(net: &Network) -> Vec<usize> {
    net.hidden_layers().iter().map(|h| h.units).collect()
}

/// Prunes `big` down to `reference`'s layer widths.
pub fn prune_to_architecture(big: &Network, reference: &Network) -> Result<Network> {
    prune_to_architecture_with(big, reference, true)
}

pub fn prune_to_architecture_with(big: &Network, reference: &Network, include_bias: bool) -> Result<Network> {
    let incompatible = |why: String| Err(Error::ArchIncompatible(why));
    if big.input_shape() != reference.input_shape() || big.layers().len() != reference.layers().len() {
        return incompatible("input shape or depth differs".into());
    }
    for (i, (a, b)) in big.layers().iter().zip(reference.layers()).enumerate() {
        let same_kind = match (a.spec, b.spec) {
            (
                LayerSpec::Conv2d { kernel_h, kernel_w, stride, padding, .. },
                LayerSpec::Conv2d { kernel_h: h2, kernel_w: w2, stride: s2, padding: p2, .. },
            ) => (kernel_h, kernel_w, stride, padding) == (h2, w2, s2, p2),
            (x, y) => std::mem::discriminant(&x) == std::mem::discriminant(&y),
        };
        if !same_kind {
            return incompatible(format!("layer {i}: {:?} vs {:?}", a.spec, b.spec));
        }
    }
    let (have, want) = (hidden_widths(big), hidden_widths(reference));
    if have.iter().zip(&want).any(|(h, w)| h < w) {
        return incompatible(format!("widths {have:?} cannot shrink to {want:?}"));
    }
    let out = magnitude_prune_with(big, &KeepPolicy::KeepCounts(want), include_bias)?;
    if out.arch_id() != reference.arch_id() {
        return incompatible("pruned architecture differs from the reference".into());
    }
    Ok(out)
}
