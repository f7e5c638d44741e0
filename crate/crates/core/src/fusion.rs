//! Ensemble fusion: exact concatenation, weight averaging, alignment, partial
//! transplantation and multi-model reduction schemes.

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, Network, UnitOrigin};
use crate::pruning::{
    build_prune_groups, magnitude_prune_with, prune_to_architecture_with, rank_cmp, select_units, KeepPolicy,
    PruneGroup,
};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

/// `k` trained networks of one architecture.
#[derive(Clone, Debug)]
pub struct EnsembleBundle {
    members: Vec<Network>,
    member_seeds: Vec<u64>,
}

impl EnsembleBundle {
    pub fn new(members: Vec<Network>, member_seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArg("an ensemble needs at least one member".into()));
        }
        if member_seeds.len() != members.len() {
            return Err(Error::InvalidArg(format!(
                "{} seeds for {} members",
                member_seeds.len(),
                members.len()
            )));
        }
        check_same_arch(&members.iter().collect::<Vec<_>>())?;
        Ok(Self { members, member_seeds })
    }

    /// Bundle with seeds `0..k`.
    pub fn from_members(members: Vec<Network>) -> Result<Self> {
        let seeds = (0..members.len() as u64).collect();
        Self::new(members, seeds)
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }

    pub fn arch_id(&self) -> &str {
        self.members[0].arch_id()
    }

    fn refs(&self) -> Vec<&Network> {
        self.members.iter().collect()
    }
}

fn check_same_arch(nets: &[&Network]) -> Result<()> {
    if let Some(bad) = nets.iter().position(|n| !n.same_architecture(nets[0])) {
        return Err(Error::ArchMismatch(format!(
            "member {bad} has arch {}, member 0 has {}",
            nets[bad].arch_id(),
            nets[0].arch_id()
        )));
    }
    Ok(())
}

fn check_fusable(nets: &[&Network]) -> Result<()> {
    if nets.len() < 2 {
        return Err(Error::InvalidArg(format!("fusion needs k ≥ 2 members, got {}", nets.len())));
    }
    check_same_arch(nets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Nt,
    NtIterative,
    NtRecursive,
    VanillaAvg,
    AlignAvg,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::Nt,
        FusionMethod::NtIterative,
        FusionMethod::NtRecursive,
        FusionMethod::VanillaAvg,
        FusionMethod::AlignAvg,
    ];

    /// Name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            FusionMethod::Nt => "NT",
            FusionMethod::NtIterative => "NT-iterative",
            FusionMethod::NtRecursive => "NT-recursive",
            FusionMethod::VanillaAvg => "VanillaAvg",
            FusionMethod::AlignAvg => "AlignAvg",
        }
    }

    /// Short command-line name.
    pub fn cli_name(self) -> &'static str {
        match self {
            FusionMethod::Nt => "nt",
            FusionMethod::NtIterative => "nt-iter",
            FusionMethod::NtRecursive => "nt-rec",
            FusionMethod::VanillaAvg => "avg",
            FusionMethod::AlignAvg => "align",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.cli_name() == name)
    }
}

/// Order of merge, prune and fine-tune steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Each member pruned on its own units, then merged, then fine-tuned.
    PruneMergeFt,
    /// Merge, prune jointly, fine-tune.
    MergePruneFt,
    /// Merge, fine-tune the wide network, prune, fine-tune again.
    MergeFtPruneFt,
}

impl Pipeline {
    pub fn label(self) -> &'static str {
        match self {
            Pipeline::PruneMergeFt => "PruneMergeFT",
            Pipeline::MergePruneFt => "MergePruneFT",
            Pipeline::MergeFtPruneFt => "MergeFTPruneFT",
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_pre_prune_epochs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub method: FusionMethod,
    /// `None` means `1 - 1/k`, i.e. back to one member's widths.
    #[serde(default)]
    pub sparsity: Option<f32>,
    pub pipeline: Pipeline,
    pub finetune: TrainConfig,
    /// Fold the bias into each unit's norm.
    #[serde(default = "default_true")]
    pub include_bias: bool,
    /// Epochs spent on the wide network under `MergeFtPruneFt`.
    #[serde(default = "default_pre_prune_epochs")]
    pub pre_prune_epochs: usize,
}

impl FusionPlan {
    pub fn new(method: FusionMethod, finetune: TrainConfig) -> Self {
        Self {
            method,
            sparsity: None,
            pipeline: Pipeline::MergePruneFt,
            finetune,
            include_bias: true,
            pre_prune_epochs: 1,
        }
    }

    pub fn effective_sparsity(&self, k: usize) -> f32 {
        self.sparsity.unwrap_or(1.0 - 1.0 / k as f32)
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("fusion preserves finiteness and shape")
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] *= parts.len();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    tensor(shape, data)
}

/// Block-diagonal stacking of `[o, i, inner]` weights into `[k·o, k·i, inner]`.
fn block_diagonal(parts: &[&Tensor]) -> Tensor {
    let k = parts.len();
    let (o, i) = (parts[0].shape()[0], parts[0].shape()[1]);
    let inner = parts[0].len() / (o * i);
    let row_len = k * i * inner;
    let mut data = vec![0.0f32; k * o * row_len];
    for (m, t) in parts.iter().enumerate() {
        for r in 0..o {
            let dst = (m * o + r) * row_len + m * i * inner;
            data[dst..dst + i * inner].copy_from_slice(t.row(r));
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] *= k;
    shape[1] *= k;
    tensor(shape, data)
}

/// Head over the concatenated features: `(1/k)·[W¹ | … | Wᵏ]`.
fn averaged_head(parts: &[&Tensor]) -> Tensor {
    let k = parts.len();
    let (o, i) = (parts[0].shape()[0], parts[0].shape()[1]);
    let mut data = Vec::with_capacity(o * k * i);
    for r in 0..o {
        for t in parts {
            data.extend(t.row(r).iter().map(|&w| w / k as f32));
        }
    }
    tensor(vec![o, k * i], data)
}

fn mean(parts: &[&Tensor]) -> Tensor {
    let mut acc = vec![0.0f32; parts[0].len()];
    for t in parts {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let k = parts.len() as f32;
    acc.iter_mut().for_each(|v| *v /= k);
    tensor(parts[0].shape().to_vec(), acc)
}

/// Concatenates hidden units of `nets` and averages their heads. In eval mode
/// the result computes the mean of the members' logits.
pub fn concat_networks(nets: &[&Network]) -> Result<Network> {
    check_fusable(nets)?;
    let k = nets.len();
    let base = nets[0];
    let unit_layers = base.unit_layers();
    let (first, head) = (unit_layers[0], *unit_layers.last().unwrap());
    if let Some(i) = base.layers()[..first]
        .iter()
        .position(|l| matches!(l.spec, LayerSpec::BatchNorm2d { .. }))
    {
        return Err(Error::UnsupportedTopology(format!(
            "batch norm at layer {i} acts on the shared input"
        )));
    }
    let mut layers = Vec::with_capacity(base.layers().len());
    for (li, layer) in base.layers().iter().enumerate() {
        let params = |p: usize| -> Vec<&Tensor> { nets.iter().map(|n| &n.layers()[li].params[p]).collect() };
        let buffers = |p: usize| -> Vec<&Tensor> { nets.iter().map(|n| &n.layers()[li].buffers[p]).collect() };
        let fused = match layer.spec {
            LayerSpec::Linear { in_features, out_features } => {
                if li == head && li == first {
                    Layer::new(layer.spec, vec![mean(&params(0)), mean(&params(1))], vec![])?
                } else if li == head {
                    let spec = LayerSpec::Linear { in_features: k * in_features, out_features };
                    Layer::new(spec, vec![averaged_head(&params(0)), mean(&params(1))], vec![])?
                } else {
                    let (w, spec) = if li == first {
                        (concat_rows(&params(0)), LayerSpec::Linear { in_features, out_features: k * out_features })
                    } else {
                        (
                            block_diagonal(&params(0)),
                            LayerSpec::Linear { in_features: k * in_features, out_features: k * out_features },
                        )
                    };
                    Layer::new(spec, vec![w, concat_rows(&params(1))], vec![])?
                }
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let (w, in_channels) = if li == first {
                    (concat_rows(&params(0)), in_channels)
                } else {
                    (block_diagonal(&params(0)), k * in_channels)
                };
                let spec = LayerSpec::Conv2d {
                    in_channels,
                    out_channels: k * out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                };
                Layer::new(spec, vec![w, concat_rows(&params(1))], vec![])?
            }
            LayerSpec::BatchNorm2d { channels } => Layer::new(
                LayerSpec::BatchNorm2d { channels: k * channels },
                vec![concat_rows(&params(0)), concat_rows(&params(1))],
                vec![concat_rows(&buffers(0)), concat_rows(&buffers(1))],
            )?,
            _ => layer.clone(),
        };
        layers.push(fused);
    }
    let origins = base
        .hidden_layers()
        .iter()
        .map(|hl| {
            (0..k)
                .flat_map(|member| (0..hl.units).map(move |index| UnitOrigin { member, index }))
                .collect()
        })
        .collect();
    Ok(Network::from_parts_unchecked(base.input_shape().to_vec(), layers, Some(origins)))
}

pub fn concat_fuse(bundle: &EnsembleBundle) -> Result<Network> {
    concat_networks(&bundle.refs())
}

/// Elementwise mean of every parameter and buffer.
pub fn average_networks(nets: &[&Network]) -> Result<Network> {
    check_fusable(nets)?;
    let layers = (0..nets[0].layers().len())
        .map(|li| {
            let of = |pick: &dyn Fn(&Layer) -> &Vec<Tensor>| -> Vec<Tensor> {
                (0..pick(&nets[0].layers()[li]).len())
                    .map(|p| mean(&nets.iter().map(|n| &pick(&n.layers()[li])[p]).collect::<Vec<_>>()))
                    .collect()
            };
            Layer::new(nets[0].layers()[li].spec, of(&|l| &l.params), of(&|l| &l.buffers))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(nets[0].input_shape().to_vec(), layers)
}

pub fn vanilla_average(bundle: &EnsembleBundle) -> Result<Network> {
    average_networks(&bundle.refs())
}

fn incoming_rows(net: &Network, layer: usize) -> (Vec<f64>, usize) {
    let l = &net.layers()[layer];
    let (w, b) = (&l.params[0], &l.params[1]);
    let d = w.row_len() + 1;
    let mut rows = Vec::with_capacity(w.shape()[0] * d);
    for r in 0..w.shape()[0] {
        rows.extend(w.row(r).iter().map(|&v| v as f64));
        rows.push(b.data()[r] as f64);
    }
    (rows, d)
}

/// Per hidden layer, the permutation of `b`'s units that best matches `a`
/// (`perm[i]` is the `b` unit placed at position `i`), and the summed
/// squared-distance cost of the chosen matchings.
pub fn align_permutations(a: &Network, b: &Network) -> Result<(Vec<Vec<usize>>, f64)> {
    check_fusable(&[a, b])?;
    let hidden = a.hidden_layers();
    let mut perms: Vec<Vec<usize>> = hidden.iter().map(|h| (0..h.units).collect()).collect();
    let mut aligned = b.clone();
    let mut total = 0.0;
    for (h, hl) in hidden.iter().enumerate() {
        let (ra, d) = incoming_rows(a, hl.layer);
        let (rb, _) = incoming_rows(&aligned, hl.layer);
        let n = hl.units;
        let mut cost = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = ra[i * d..(i + 1) * d]
                    .iter()
                    .zip(&rb[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let (assign, c) = assignment::solve(&cost, n);
        total += c;
        let mut step: Vec<Vec<usize>> = hidden.iter().map(|h| (0..h.units).collect()).collect();
        step[h] = assign.clone();
        aligned = select_units(&aligned, &step)?;
        perms[h] = assign;
    }
    Ok((perms, total))
}

/// Permutes `b` onto `a` layer by layer, then averages the two.
pub fn align_average(a: &Network, b: &Network) -> Result<Network> {
    let (perms, _) = align_permutations(a, b)?;
    let mut aligned = select_units(b, &perms)?;
    aligned.clear_origins();
    average_networks(&[a, &aligned])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    Recipient,
    Donor,
}

/// Replaces the `round(p·N)` weakest recipient units of every hidden layer by
/// the donor's `round(p·N)` strongest, carrying the donor's outgoing columns.
/// Units from different networks are not connected. The head bias comes from
/// `head`; head columns are never rescaled, so `p = 0` returns the recipient.
pub fn transplant_fraction(recipient: &Network, donor: &Network, p: f32, head: HeadSource) -> Result<Network> {
    check_fusable(&[recipient, donor])?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArg(format!("transplant fraction must lie in [0, 1], got {p}")));
    }
    if recipient.hidden_layers().is_empty() {
        return Ok(match head {
            HeadSource::Recipient => recipient.clone(),
            HeadSource::Donor => donor.clone(),
        });
    }
    let both = concat_networks(&[recipient, donor])?;
    let groups = build_prune_groups(&both, true)?;
    let kept: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let n = g.len() / 2;
            let moved = (p as f64 * n as f64).round() as usize;
            let ranked = |mut part: Vec<&PruneGroup>| {
                part.sort_by(|a, b| rank_cmp(a, b));
                part.into_iter().map(|u| u.unit.unit_index).collect::<Vec<_>>()
            };
            let own = ranked(g[..n].iter().collect());
            let donated = ranked(g[n..].iter().collect());
            let mut keep: Vec<usize> = own[..n - moved].iter().chain(&donated[..moved]).copied().collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    let mut out = select_units(&both, &kept)?;
    out.clear_origins();
    let head_index = *out.unit_layers().last().unwrap();
    let bias_from = match head {
        HeadSource::Recipient => recipient,
        HeadSource::Donor => donor,
    };
    let layer = &mut out.layers_mut()[head_index];
    layer.params[0].data_mut().iter_mut().for_each(|w| *w *= 2.0);
    layer.params[1] = bias_from.layers()[head_index].params[1].clone();
    Ok(out)
}

/// Concatenates two networks and prunes back to half the width.
fn merge_pair(a: &Network, b: &Network, include_bias: bool) -> Result<Network> {
    let both = concat_networks(&[a, b])?;
    magnitude_prune_with(&both, &KeepPolicy::Sparsity(0.5), include_bias)
}

/// Joint fusion: concatenate all members, prune once.
pub fn nt_fuse(bundle: &EnsembleBundle, plan: &FusionPlan) -> Result<Network> {
    let all = concat_fuse(bundle)?;
    match plan.sparsity {
        None => prune_to_architecture_with(&all, &bundle.members[0], plan.include_bias),
        Some(s) => magnitude_prune_with(&all, &KeepPolicy::Sparsity(s), plan.include_bias),
    }
}

/// Left fold in bundle order: `r ← prune(concat(r, next), 0.5)`.
pub fn fuse_iterative(bundle: &EnsembleBundle, plan: &FusionPlan) -> Result<Network> {
    check_fusable(&bundle.refs())?;
    let mut acc = merge_pair(&bundle.members[0], &bundle.members[1], plan.include_bias)?;
    for next in &bundle.members[2..] {
        acc = merge_pair(&acc, next, plan.include_bias)?;
    }
    Ok(acc)
}

/// Balanced pairwise reduction; odd groups split `⌈k/2⌉ / ⌊k/2⌋`.
pub fn fuse_recursive(bundle: &EnsembleBundle, plan: &FusionPlan) -> Result<Network> {
    fn reduce(nets: &[Network], include_bias: bool) -> Result<Network> {
        if nets.len() == 1 {
            return Ok(nets[0].clone());
        }
        let mid = nets.len().div_ceil(2);
        let (left, right) = rayon::join(|| reduce(&nets[..mid], include_bias), || reduce(&nets[mid..], include_bias));
        merge_pair(&left?, &right?, include_bias)
    }
    check_fusable(&bundle.refs())?;
    reduce(&bundle.members, plan.include_bias)
}

/// Splits `width` into `k` near-equal shares, earlier members taking the remainder.
pub fn member_quota(width: usize, k: usize) -> Vec<usize> {
    (0..k).map(|m| width / k + usize::from(m < width % k)).collect()
}

/// Each member keeps its own strongest units; the survivors are then merged
/// into one network of the member architecture.
pub fn prune_then_merge(bundle: &EnsembleBundle, include_bias: bool) -> Result<Network> {
    let all = concat_fuse(bundle)?;
    let quotas = bundle.members[0]
        .hidden_layers()
        .iter()
        .map(|hl| member_quota(hl.units, bundle.k()))
        .collect();
    magnitude_prune_with(&all, &KeepPolicy::PerMemberQuota(quotas), include_bias)
}

/// The merge step of `plan.method` (no fine-tuning).
pub fn fuse(bundle: &EnsembleBundle, plan: &FusionPlan) -> Result<Network> {
    match plan.method {
        FusionMethod::Nt => nt_fuse(bundle, plan),
        FusionMethod::NtIterative => fuse_iterative(bundle, plan),
        FusionMethod::NtRecursive => fuse_recursive(bundle, plan),
        FusionMethod::VanillaAvg => vanilla_average(bundle),
        FusionMethod::AlignAvg => match bundle.members() {
            [a, b] => align_average(a, b),
            _ => Err(Error::InvalidArg(format!("alignment averaging takes exactly 2 members, got {}", bundle.k()))),
        },
    }
}
