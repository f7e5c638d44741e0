//! Acceptance suite. Each test checks one criterion, prints a single
//! `criterion N ...: PASS|FAIL` line, then asserts. Tests hold a shared lock
//! so wall-clock budgets are measured without interference.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ntfuse::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointMeta};
use ntfuse::experiments::{
    ablation_multimodel, ablation_sweep, compare_methods, failure_case, measure_fusion_cost, train_member,
    ArchTemplate, CostOptions, DatasetDesc, ExperimentKind, ExperimentSpec, PlanSpec, RunReport, SweepAxis,
};
use ntfuse::fusion::{
    concat_fuse, fuse_iterative, fuse_recursive, nt_fuse, transplant_fraction, EnsembleBundle, FusionMethod,
    FusionPlan, HeadSource, Pipeline,
};
use ntfuse::network::{convnet_specs, mlp_specs, LayerSpec, Mode, Network};
use ntfuse::pruning::{hidden_widths, kept_units, magnitude_prune, KeepPolicy};
use ntfuse::rng::RngStream;
use ntfuse::tensor::Tensor;
use ntfuse::training::loss::{cross_entropy, kd_loss, kd_loss_with_grad};
use ntfuse::training::{KdConfig, TrainConfig};

static LOCK: Mutex<()> = Mutex::new(());

fn report(id: usize, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} [{name}]: {verdict} ({detail}; {:.1} s)\n", elapsed.as_secs_f64());
    // Written past the test harness capture so every verdict shows up.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn run_criterion(id: usize, name: &str, budget: Option<Duration>, body: impl FnOnce() -> (bool, String)) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = body();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed < b);
    let detail = match budget {
        Some(b) if !in_budget => format!("{detail}; over the {} s budget", b.as_secs()),
        _ => detail,
    };
    report(id, name, ok && in_budget, &detail, elapsed);
    assert!(ok && in_budget, "criterion {id} failed: {detail}");
}

fn random_batch(n: usize, shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, "acceptance/inputs");
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len = full.iter().product();
    Tensor::new(full, (0..len).map(|_| rng.normal()).collect()).unwrap()
}

fn random_mlp(seed: u64) -> Network {
    Network::init(&[12], &mlp_specs(12, &[16, 10], 5), &mut RngStream::new(seed, "acceptance/mlp")).unwrap()
}

fn random_conv(seed: u64) -> Network {
    let specs = convnet_specs([2, 8, 8], &[4, 6], &[8], 5).unwrap();
    let mut net = Network::init(&[2, 8, 8], &specs, &mut RngStream::new(seed, "acceptance/conv")).unwrap();
    let mut rng = RngStream::new(seed, "acceptance/bn");
    for layer in net.layers_mut() {
        if let LayerSpec::BatchNorm2d { .. } = layer.spec {
            for t in layer.params.iter_mut().chain(layer.buffers.iter_mut()) {
                t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(0.3, 1.7));
            }
        }
    }
    net
}

#[test]
fn criterion_01_output_average_equivalence() {
    run_criterion(1, "output-average equivalence", Some(Duration::from_secs(10)), || {
        let mut worst = 0.0f64;
        for k in [2usize, 3, 4, 8] {
            for conv in [false, true] {
                let members: Vec<Network> = (0..k as u64)
                    .map(|s| if conv { random_conv(100 * k as u64 + s) } else { random_mlp(100 * k as u64 + s) })
                    .collect();
                let fused = concat_fuse(&EnsembleBundle::from_members(members.clone()).unwrap()).unwrap();
                let x = random_batch(100, members[0].input_shape(), k as u64);
                let got = fused.forward(&x, Mode::Eval).unwrap();
                let outs: Vec<Tensor> = members.iter().map(|m| m.forward(&x, Mode::Eval).unwrap()).collect();
                for (i, &g) in got.data().iter().enumerate() {
                    let want = outs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / k as f64;
                    worst = worst.max((g as f64 - want).abs() / want.abs().max(1.0));
                }
            }
        }
        (worst <= 1e-5, format!("max relative error {worst:.2e} over 8 cases x 100 inputs"))
    });
}

#[test]
fn criterion_02_gradient_correctness() {
    run_criterion(2, "gradient correctness", Some(Duration::from_secs(60)), || {
        let s = common::gradcheck::check_instances(50);
        let ok = s.kinds == 6 && s.skipped * 20 < s.checked;
        (ok, format!("50 nets, {} layer kinds, {} coordinates checked, {} kink skips", s.kinds, s.checked, s.skipped))
    });
}

/// Exhaustive oracle: f64 norms of weight row plus bias, stable sort by
/// descending norm, keep the first `keep`.
fn oracle_kept(net: &Network, keep: &[usize]) -> Vec<Vec<usize>> {
    let layers: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec.is_parameterized_unit_layer())
        .map(|(i, _)| i)
        .collect();
    layers[..layers.len() - 1]
        .iter()
        .zip(keep)
        .map(|(&li, &k)| {
            let l = &net.layers()[li];
            let rows = l.params[0].shape()[0];
            let norms: Vec<f64> = (0..rows)
                .map(|r| {
                    let w: f64 = l.params[0].row(r).iter().map(|&v| (v as f64).powi(2)).sum();
                    (w + (l.params[1].data()[r] as f64).powi(2)).sqrt()
                })
                .collect();
            let mut order: Vec<usize> = (0..rows).collect();
            order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
            let mut kept = order[..k].to_vec();
            kept.sort_unstable();
            kept
        })
        .collect()
}

fn with_ties(mut net: Network, seed: u64) -> Network {
    let mut rng = RngStream::new(seed, "acceptance/ties");
    let li = net.layers().iter().position(|l| l.spec.is_parameterized_unit_layer()).unwrap();
    let layer = &mut net.layers_mut()[li];
    let rows = layer.params[0].shape()[0];
    let src = (rng.next_u64() % rows as u64) as usize;
    let row = layer.params[0].row(src).to_vec();
    let bias = layer.params[1].data()[src];
    for dst in (0..rows).filter(|&r| r != src && rng.uniform(0.0, 1.0) < 0.4) {
        let len = row.len();
        layer.params[0].data_mut()[dst * len..(dst + 1) * len].copy_from_slice(&row);
        layer.params[1].data_mut()[dst] = bias;
    }
    net
}

#[test]
fn criterion_03_pruning_oracle_equivalence() {
    run_criterion(3, "pruning oracle equivalence", Some(Duration::from_secs(10)), || {
        let mut mismatches = 0;
        for seed in 0..100u64 {
            let base = if seed % 2 == 0 { random_mlp(seed) } else { random_conv(seed) };
            let net = if seed % 3 == 0 { with_ties(base, seed) } else { base };
            let widths = hidden_widths(&net);
            let keep: Vec<usize> = widths.iter().enumerate().map(|(i, &w)| 1 + (seed as usize + i) % w).collect();
            let policy = KeepPolicy::KeepCounts(keep.clone());
            let want = oracle_kept(&net, &keep);
            let got = kept_units(&net, &policy, true).unwrap();
            let pruned = magnitude_prune(&net, &policy).unwrap();
            let li = net.layers().iter().position(|l| l.spec.is_parameterized_unit_layer()).unwrap();
            let rows_match = want[0]
                .iter()
                .enumerate()
                .all(|(i, &r)| pruned.layers()[li].params[0].row(i) == net.layers()[li].params[0].row(r));
            if got != want || hidden_widths(&pruned) != keep || !rows_match {
                mismatches += 1;
            }
        }
        let mut restored = true;
        for k in [2usize, 3, 4, 8] {
            for conv in [false, true] {
                let members: Vec<Network> =
                    (0..k as u64).map(|s| if conv { random_conv(s) } else { random_mlp(s) }).collect();
                let wide = concat_fuse(&EnsembleBundle::from_members(members.clone()).unwrap()).unwrap();
                let s = 1.0 - 1.0 / k as f32;
                let back = magnitude_prune(&wide, &KeepPolicy::Sparsity(s)).unwrap();
                restored &= back.arch_id() == members[0].arch_id() && back.specs() == members[0].specs();
            }
        }
        (
            mismatches == 0 && restored,
            format!("{mismatches} oracle mismatches in 100 nets; member architecture restored for k in 2,3,4,8: {restored}"),
        )
    });
}

/// Desk-scale setting shared by the trend criteria.
fn desk_spec(name: &str) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        dataset: DatasetDesc::Blobs {
            n_train: 5000,
            n_test: 2000,
            classes: 10,
            dim: 32,
            spread: 1.0,
            clusters_per_class: 2,
            seed: 0,
        },
        arch: ArchTemplate::Mlp { width: 64, depth: 3 },
        k: 2,
        seeds: (0..5).collect(),
        train: TrainConfig::new(20, 0.01, 0.9, 64, 0),
        plan: PlanSpec::default(),
        finetune: None,
        finetune_epochs: 3,
        kind: ExperimentKind::Pipeline,
        outputs: None,
    }
}

fn find<'a>(reports: &'a [RunReport], method: &str) -> &'a RunReport {
    reports.iter().find(|r| r.method == method).unwrap_or_else(|| panic!("no report for {method}"))
}

#[test]
fn criterion_04_nt_effectiveness_trend() {
    run_criterion(4, "NT effectiveness trend", Some(Duration::from_secs(600)), || {
        let spec = ExperimentSpec { finetune_epochs: 30, ..desk_spec("effectiveness") };
        let reports = compare_methods(&spec, &[FusionMethod::Nt, FusionMethod::VanillaAvg], None).unwrap();
        let (nt, avg) = (find(&reports, "NT"), find(&reports, "VanillaAvg"));
        let nt_best = nt.mean(|r| r.best_acc().unwrap());
        let member_best = nt.mean(|r| r.best_member_acc);
        let nt3 = nt.mean(|r| r.acc_after(3).unwrap());
        let avg3 = avg.mean(|r| r.acc_after(3).unwrap());
        (
            nt_best >= member_best && nt3 >= avg3,
            format!(
                "NT best {nt_best:.4} vs best member {member_best:.4}; after 3 epochs NT {nt3:.4} vs averaging {avg3:.4}"
            ),
        )
    });
}

#[test]
fn criterion_05_self_fusion_failure_direction() {
    run_criterion(5, "self-fusion failure direction", Some(Duration::from_secs(300)), || {
        let reports = failure_case(&desk_spec("self-fusion")).unwrap();
        let nt = &reports[0];
        let drops: Vec<f32> = nt.records.iter().map(|r| r.best_member_acc - r.immediate_acc).collect();
        let recovered = nt
            .records
            .iter()
            .filter(|r| r.finetuned_acc.iter().take(3).any(|&a| a >= r.best_member_acc - 0.01))
            .count();
        let ok = drops.iter().all(|&d| d > 0.0) && recovered == nt.records.len();
        (ok, format!("drops {drops:.3?}; within 1 point after <= 3 epochs in {recovered}/5 seeds"))
    });
}

#[test]
fn criterion_06_transplant_fraction_curve() {
    run_criterion(6, "transplant-fraction curve", Some(Duration::from_secs(600)), || {
        let spec = desk_spec("transplant");
        let (train, test) = spec.dataset.load().unwrap();
        let specs = spec.arch.specs(train.sample_shape(), train.num_classes()).unwrap();
        let member =
            |i| train_member(&specs, train.sample_shape(), &train, &test, &spec.train, 0, i).unwrap();
        let (r, d) = (member(0), member(1));
        let same = transplant_fraction(&r, &d, 0.0, HeadSource::Recipient).unwrap();
        let identical = encode_checkpoint(&same, &CheckpointMeta::default()).unwrap()
            == encode_checkpoint(&r, &CheckpointMeta::default()).unwrap();

        let fractions = [0.0, 0.25, 0.5, 0.75, 1.0];
        let reports = ablation_sweep(&spec, SweepAxis::TransplantFraction, &fractions).unwrap();
        let at = |p: usize, seed: usize| reports[p].records[seed].acc_after(3).unwrap();
        let peaks = (0..5).filter(|&s| at(2, s) >= at(0, s) && at(2, s) >= at(4, s)).count();
        let means: Vec<String> =
            reports.iter().map(|r| format!("{:.4}", r.mean(|x| x.acc_after(3).unwrap()))).collect();
        (
            identical && peaks >= 4,
            format!("p=0 bit-identical: {identical}; p=0.5 >= both endpoints in {peaks}/5 seeds; means {means:?}"),
        )
    });
}

#[test]
fn criterion_07_multi_model_trends() {
    run_criterion(7, "multi-model trends", Some(Duration::from_secs(900)), || {
        let spec = ExperimentSpec { finetune_epochs: 0, ..desk_spec("multimodel") };
        let methods = [FusionMethod::Nt, FusionMethod::NtIterative, FusionMethod::NtRecursive];
        let reports = ablation_multimodel(&spec, &[2, 4, 8], &methods).unwrap();
        let imm = |label: &str, k: usize| find(&reports, &format!("{label} k={k}")).mean(|r| r.immediate_acc);
        let nt: Vec<f64> = [2, 4, 8].iter().map(|&k| imm("NT", k)).collect();
        let monotone = nt.windows(2).all(|w| w[1] <= w[0]);
        let iter_wins = [4, 8].iter().all(|&k| imm("NT-iterative", k) >= imm("NT", k));
        let k2_reports = ["NT", "NT-iterative", "NT-recursive"].map(|m| find(&reports, &format!("{m} k=2")));
        let k2_equal = k2_reports.iter().all(|r| {
            r.records.iter().zip(&k2_reports[0].records).all(|(a, b)| a.immediate_acc == b.immediate_acc)
        });

        let (train, test) = spec.dataset.load().unwrap();
        let specs = spec.arch.specs(train.sample_shape(), train.num_classes()).unwrap();
        let members: Vec<Network> = (0..2)
            .map(|i| train_member(&specs, train.sample_shape(), &train, &test, &spec.train, 0, i).unwrap())
            .collect();
        let bundle = EnsembleBundle::from_members(members).unwrap();
        let plan = FusionPlan::new(FusionMethod::Nt, spec.train);
        let bytes = |n: Network| encode_checkpoint(&n, &CheckpointMeta::default()).unwrap();
        let joint = bytes(nt_fuse(&bundle, &plan).unwrap());
        let nets_equal = joint == bytes(fuse_iterative(&bundle, &plan).unwrap())
            && joint == bytes(fuse_recursive(&bundle, &plan).unwrap());

        let iter: Vec<f64> = [4, 8].iter().map(|&k| imm("NT-iterative", k)).collect();
        (
            monotone && iter_wins && k2_equal && nets_equal,
            format!(
                "NT immediate by k=2,4,8 {nt:.4?}; iterative at k=4,8 {iter:.4?}; k=2 schemes identical: {}",
                k2_equal && nets_equal
            ),
        )
    });
}

#[test]
fn criterion_08_fusion_cost_ordering() {
    run_criterion(8, "fusion cost ordering", None, || {
        let opts = CostOptions { reps: 3, ..CostOptions::default() };
        let table = measure_fusion_cost(&[256, 1024, 4096], 2, &opts).unwrap();
        let mut ok = true;
        let mut parts = Vec::new();
        for w in [256, 1024, 4096] {
            let avg = table.get(FusionMethod::VanillaAvg, w).unwrap();
            let nt = table.get(FusionMethod::Nt, w).unwrap();
            let ratio = nt.peak_bytes as f64 / nt.model_bytes as f64;
            ok &= avg.wall_seconds < nt.wall_seconds && ratio <= 3.0;
            if w == 4096 {
                ok &= nt.wall_seconds < 5.0;
            }
            let align = table
                .get(FusionMethod::AlignAvg, w)
                .map_or("not measured".to_string(), |a| format!("{:.4} s", a.wall_seconds));
            parts.push(format!(
                "w={w}: avg {:.4} s, NT {:.4} s, align {align}, NT peak {ratio:.2}x inputs",
                avg.wall_seconds, nt.wall_seconds
            ));
        }
        (ok, parts.join("; "))
    });
}

#[test]
fn criterion_09_distillation_plumbing() {
    run_criterion(9, "distillation plumbing", Some(Duration::from_secs(30)), || {
        let mut rng = RngStream::new(9, "acceptance/kd");
        let mut logits = |n: usize, c: usize| {
            Tensor::new(vec![n, c], (0..n * c).map(|_| 3.0 * rng.normal()).collect()).unwrap()
        };
        let mut ce_exact = true;
        let mut zero_soft = true;
        for i in 0..200usize {
            let (n, c) = (1 + i % 7, 2 + i % 5);
            let (s, t) = (logits(n, c), logits(n, c));
            let labels: Vec<usize> = (0..n).map(|j| (i + j) % c).collect();
            let hard_only = KdConfig::new(1.0 + (i % 4) as f32, 0.0).unwrap();
            ce_exact &= kd_loss(&s, &t, &labels, &hard_only).unwrap().to_bits()
                == cross_entropy(&s, &labels).unwrap().to_bits();
            zero_soft &= kd_loss(&s, &s, &labels, &KdConfig::new(2.0, 1.0).unwrap()).unwrap() == 0.0;
        }
        // Central differences of an f64 reference at T = 2.
        let mut worst = 0.0f64;
        for i in 0..50usize {
            let (n, c) = (3, 4);
            let (s, t) = (logits(n, c), logits(n, c));
            let labels: Vec<usize> = (0..n).map(|j| (i + j) % c).collect();
            let kd = KdConfig::new(2.0, [1.0, 0.5, 0.0][i % 3]).unwrap();
            let (_, grad) = kd_loss_with_grad(&s, &t, &labels, &kd).unwrap();
            let reference = |x: &[f64]| reference_kd(x, t.data(), &labels, c, &kd);
            let base: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
            for j in 0..base.len() {
                let (mut p, mut m) = (base.clone(), base.clone());
                p[j] += common::gradcheck::EPS;
                m[j] -= common::gradcheck::EPS;
                let numeric = (reference(&p) - reference(&m)) / (2.0 * common::gradcheck::EPS);
                let a = grad[j] as f64;
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
            }
        }
        (
            ce_exact && zero_soft && worst <= common::gradcheck::REL_TOL,
            format!(
                "soft_weight=0 equals cross-entropy bitwise: {ce_exact}; self-teacher loss zero: {zero_soft}; \
                 worst T=2 gradient error {worst:.2e}"
            ),
        )
    });
}

fn reference_kd(s: &[f64], t: &[f32], labels: &[usize], c: usize, kd: &KdConfig) -> f64 {
    let lsm = |row: &[f64], scale: f64| {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * scale));
        let lse = row.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|&v| v * scale - lse).collect::<Vec<f64>>()
    };
    let temp = kd.temperature as f64;
    let n = labels.len();
    let (mut ce, mut soft) = (0.0, 0.0);
    for i in 0..n {
        let row = &s[i * c..(i + 1) * c];
        let trow: Vec<f64> = t[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
        ce -= lsm(row, 1.0)[labels[i]];
        let (ls, lt) = (lsm(row, 1.0 / temp), lsm(&trow, 1.0 / temp));
        soft += temp * temp * (0..c).map(|j| lt[j].exp() * (lt[j] - ls[j])).sum::<f64>();
    }
    (kd.soft_weight as f64 * soft + kd.hard_weight() as f64 * ce) / n as f64
}

#[test]
fn criterion_10_persistence_and_determinism() {
    run_criterion(10, "persistence and determinism", None, || {
        let mut round_trips = 0;
        for seed in 0..100u64 {
            let net = if seed % 2 == 0 { random_conv(seed) } else { random_mlp(seed) };
            let meta = CheckpointMeta { seed: Some(seed), ..Default::default() };
            let bytes = encode_checkpoint(&net, &meta).unwrap();
            let (back, m) = decode_checkpoint(&bytes).unwrap();
            if m == meta && back.layers() == net.layers() && encode_checkpoint(&back, &meta).unwrap() == bytes {
                round_trips += 1;
            }
        }

        let spec = ExperimentSpec {
            dataset: DatasetDesc::Blobs {
                n_train: 300,
                n_test: 200,
                classes: 4,
                dim: 8,
                spread: 0.8,
                clusters_per_class: 2,
                seed: 3,
            },
            arch: ArchTemplate::Mlp { width: 16, depth: 2 },
            seeds: vec![0, 1],
            train: TrainConfig::new(4, 0.01, 0.9, 32, 0),
            kind: ExperimentKind::Pipelines {
                pipelines: vec![Pipeline::PruneMergeFt, Pipeline::MergePruneFt, Pipeline::MergeFtPruneFt],
            },
            ..desk_spec("rerun")
        };
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("spec.json");
        std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        let run = |out: &str| {
            let out_dir = dir.path().join(out);
            let argv = ["ntfuse", "experiment", "--spec", spec_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
            let code = ntfuse::cli::run(argv, &mut Vec::new(), &mut Vec::new());
            assert_eq!(code, 0);
            ["report.csv", "report.json", "report.svg"].map(|f| std::fs::read(out_dir.join(f)).unwrap())
        };
        let (a, b) = (run("a"), run("b"));
        let identical = a == b;
        (
            round_trips == 100 && identical,
            format!("{round_trips}/100 checkpoints bit-exact; rerun CSV/JSON/SVG byte-identical: {identical}"),
        )
    });
}
