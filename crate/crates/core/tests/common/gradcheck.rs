//! Independent f64 forward pass and central-difference gradient checks.
//! Coordinates whose perturbation flips a ReLU sign or a max-pool winner are
//! skipped; the rest must agree to 1e-3 relative error.

use ntfuse::network::{LayerSpec, Loss, Network};
use ntfuse::rng::RngStream;
use ntfuse::tensor::Tensor;
use ntfuse::training::KdConfig;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude the check is absolute (1e-6): f32 backward through
/// BatchNorm cancels terms and leaves ~1e-7 absolute noise.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
struct Act {
    data: Vec<f64>,
    /// Per-sample feature dims: `[f]` or `[c, h, w]`.
    dims: Vec<usize>,
}

/// ReLU signs and pool winners seen during a forward pass.
type Pattern = Vec<usize>;

fn reference_forward(specs: &[LayerSpec], params: &[Vec<Vec<f64>>], x: &Act, n: usize, pattern: &mut Pattern) -> Act {
    let mut a = x.clone();
    for (spec, p) in specs.iter().zip(params) {
        a = match *spec {
            LayerSpec::Linear { in_features, out_features } => {
                let mut out = vec![0.0; n * out_features];
                for s in 0..n {
                    for o in 0..out_features {
                        let mut acc = p[1][o];
                        for i in 0..in_features {
                            acc += p[0][o * in_features + i] * a.data[s * in_features + i];
                        }
                        out[s * out_features + o] = acc;
                    }
                }
                Act { data: out, dims: vec![out_features] }
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let (h, w) = (a.dims[1], a.dims[2]);
                let oh = (h + 2 * padding - kernel_h) / stride + 1;
                let ow = (w + 2 * padding - kernel_w) / stride + 1;
                let mut out = vec![0.0; n * out_channels * oh * ow];
                for s in 0..n {
                    for oc in 0..out_channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut acc = p[1][oc];
                                for ic in 0..in_channels {
                                    for ky in 0..kernel_h {
                                        for kx in 0..kernel_w {
                                            let iy = (y * stride + ky) as isize - padding as isize;
                                            let ix = (xx * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            let wi = ((oc * in_channels + ic) * kernel_h + ky) * kernel_w + kx;
                                            let xi = ((s * in_channels + ic) * h + iy as usize) * w + ix as usize;
                                            acc += p[0][wi] * a.data[xi];
                                        }
                                    }
                                }
                                out[((s * out_channels + oc) * oh + y) * ow + xx] = acc;
                            }
                        }
                    }
                }
                Act { data: out, dims: vec![out_channels, oh, ow] }
            }
            LayerSpec::BatchNorm2d { channels } => {
                let hw = a.dims[1] * a.dims[2];
                let count = (n * hw) as f64;
                let mut out = a.data.clone();
                for c in 0..channels {
                    let idx = |s: usize, i: usize| (s * channels + c) * hw + i;
                    let mut mean = 0.0;
                    for s in 0..n {
                        for i in 0..hw {
                            mean += a.data[idx(s, i)];
                        }
                    }
                    mean /= count;
                    let mut var = 0.0;
                    for s in 0..n {
                        for i in 0..hw {
                            var += (a.data[idx(s, i)] - mean).powi(2);
                        }
                    }
                    var /= count;
                    let inv = 1.0 / (var + 1e-5).sqrt();
                    for s in 0..n {
                        for i in 0..hw {
                            out[idx(s, i)] = p[0][c] * (a.data[idx(s, i)] - mean) * inv + p[1][c];
                        }
                    }
                }
                Act { data: out, dims: a.dims.clone() }
            }
            LayerSpec::MaxPool2d { window } => {
                let (c, h, w) = (a.dims[0], a.dims[1], a.dims[2]);
                let (oh, ow) = (h / window, w / window);
                let mut out = vec![0.0; n * c * oh * ow];
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        let v = a.data[((s * c + ch) * h + y * window + ky) * w + xx * window + kx];
                                        if v > best {
                                            best = v;
                                            arg = ky * window + kx;
                                        }
                                    }
                                }
                                pattern.push(arg);
                                out[((s * c + ch) * oh + y) * ow + xx] = best;
                            }
                        }
                    }
                }
                Act { data: out, dims: vec![c, oh, ow] }
            }
            LayerSpec::Relu => {
                pattern.extend(a.data.iter().map(|&v| (v > 0.0) as usize));
                Act { data: a.data.iter().map(|&v| v.max(0.0)).collect(), dims: a.dims.clone() }
            }
            LayerSpec::Flatten => Act { dims: vec![a.dims.iter().product()], data: a.data },
        };
    }
    a
}

fn log_softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = row.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v * scale - lse).collect()
}

fn reference_loss(logits: &[f64], c: usize, labels: &[usize], kd: Option<(&[f32], KdConfig)>) -> f64 {
    let n = labels.len();
    let mut ce = 0.0;
    let mut soft = 0.0;
    for s in 0..n {
        let row = &logits[s * c..(s + 1) * c];
        ce -= log_softmax(row, 1.0)[labels[s]];
        if let Some((teacher, cfg)) = kd {
            let t = cfg.temperature as f64;
            let trow: Vec<f64> = teacher[s * c..(s + 1) * c].iter().map(|&v| v as f64).collect();
            let ls = log_softmax(row, 1.0 / t);
            let lt = log_softmax(&trow, 1.0 / t);
            soft += t * t * (0..c).map(|j| lt[j].exp() * (lt[j] - ls[j])).sum::<f64>();
        }
    }
    match kd {
        None => ce / n as f64,
        Some((_, cfg)) => cfg.soft_weight as f64 * soft / n as f64 + cfg.hard_weight() as f64 * ce / n as f64,
    }
}

pub struct Case {
    pub net: Network,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub teacher: Option<(Tensor, KdConfig)>,
}

fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn make_case(i: usize) -> Case {
    let mut rng = RngStream::new(i as u64, "gradcheck");
    let classes = 3;
    let (input, specs): (Vec<usize>, Vec<LayerSpec>) = match i % 4 {
        0 => (
            vec![5],
            vec![
                LayerSpec::Linear { in_features: 5, out_features: 6 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 6, out_features: 4 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 4, out_features: classes },
            ],
        ),
        1 => (
            vec![2, 4, 4],
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm2d { channels: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: 12, out_features: classes },
            ],
        ),
        2 => (
            vec![1, 5, 5],
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel_h: 3, kernel_w: 2, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: 2 * 3 * 3, out_features: 4 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 4, out_features: classes },
            ],
        ),
        _ => (
            vec![2, 6, 6],
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel_h: 1, kernel_w: 1, stride: 1, padding: 0 },
                LayerSpec::BatchNorm2d { channels: 2 },
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel_h: 2, kernel_w: 2, stride: 1, padding: 0 },
                LayerSpec::BatchNorm2d { channels: 3 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: 12, out_features: classes },
            ],
        ),
    };
    let mut net = Network::init(&input, &specs, &mut rng.split("init")).unwrap();
    // Non-trivial BN affine parameters.
    for layer in net.layers_mut() {
        if let LayerSpec::BatchNorm2d { .. } = layer.spec {
            for p in &mut layer.params {
                p.data_mut().iter_mut().for_each(|v| *v += 0.5 * rng.normal());
            }
        }
    }
    let n = 8;
    let mut shape = vec![n];
    shape.extend(&input);
    let batch = random_tensor(&shape, &mut rng);
    let labels = (0..n).map(|s| (s + i) % classes).collect();
    let teacher = (i.is_multiple_of(5)).then(|| {
        let cfg = KdConfig::new(2.0, if i.is_multiple_of(10) { 1.0 } else { 0.5 }).unwrap();
        (random_tensor(&[n, classes], &mut rng), cfg)
    });
    Case { net, batch, labels, teacher }
}

fn params_f64(net: &Network) -> Vec<Vec<Vec<f64>>> {
    net.layers().iter().map(|l| l.params.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()).collect()
}

pub fn check_case(case: &Case) -> (usize, usize) {
    let loss = match &case.teacher {
        None => Loss::CrossEntropy,
        Some((t, cfg)) => Loss::Distill { teacher_logits: t, config: *cfg },
    };
    let (_, grads, _) = case.net.backward(&case.batch, &case.labels, &loss).unwrap();
    let specs = case.net.specs();
    let n = case.labels.len();
    let x = Act { data: case.batch.data().iter().map(|&v| v as f64).collect(), dims: case.batch.shape()[1..].to_vec() };
    let c = case.net.num_classes();
    let kd = case.teacher.as_ref().map(|(t, cfg)| (t.data(), *cfg));
    let base = params_f64(&case.net);
    let eval = |params: &[Vec<Vec<f64>>]| {
        let mut pattern = Vec::new();
        let out = reference_forward(&specs, params, &x, n, &mut pattern);
        (reference_loss(&out.data, c, &case.labels, kd), pattern)
    };
    let (_, base_pattern) = eval(&base);
    let (mut checked, mut skipped) = (0, 0);
    for (li, layer) in base.iter().enumerate() {
        for (pi, p) in layer.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = base.clone();
                plus[li][pi][j] += EPS;
                let mut minus = base.clone();
                minus[li][pi][j] -= EPS;
                let (lp, pp) = eval(&plus);
                let (lm, pm) = eval(&minus);
                if pp != base_pattern || pm != base_pattern {
                    skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * EPS);
                let analytic = grads.layers[li][pi].data()[j] as f64;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                assert!(
                    rel <= REL_TOL,
                    "layer {li} ({:?}) param {pi}[{j}]: analytic {analytic} numeric {numeric} rel {rel}",
                    specs[li]
                );
                checked += 1;
            }
        }
    }
    (checked, skipped)
}


#[derive(Debug, Default)]
pub struct Summary {
    pub checked: usize,
    pub skipped: usize,
    /// Distinct layer kinds seen.
    pub kinds: usize,
}

/// Checks `n` generated instances; panics on the first mismatch.
pub fn check_instances(n: usize) -> Summary {
    let mut kinds = std::collections::HashSet::new();
    let mut summary = Summary::default();
    for i in 0..n {
        let case = make_case(i);
        for l in case.net.layers() {
            kinds.insert(std::mem::discriminant(&l.spec));
        }
        let (c, s) = check_case(&case);
        summary.checked += c;
        summary.skipped += s;
    }
    summary.kinds = kinds.len();
    summary
}
