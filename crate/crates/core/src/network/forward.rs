use super::{infer_shape, FeatureShape, LayerSpec, Network, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::training::loss::{self, KdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BatchNorm.
    Train,
    /// Running statistics in BatchNorm.
    Eval,
}

/// Objective for [`Network::backward`].
#[derive(Clone, Copy, Debug)]
pub enum Loss<'a> {
    CrossEntropy,
    Distill { teacher_logits: &'a Tensor, config: KdConfig },
}

/// One gradient tensor per trainable parameter, in `Layer::params` order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
}

enum Cache {
    Linear { input: Vec<f32> },
    Conv { input: Vec<f32>, geom: ConvGeom },
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32>, mean: Vec<f32>, var: Vec<f32>, count: usize },
    Pool { argmax: Vec<u32>, in_len: usize },
    Relu { output: Vec<f32> },
    Flatten,
}

/// Train-mode forward record needed for backward and for BN stat updates.
pub struct Trace {
    batch: usize,
    caches: Vec<Cache>,
    shapes: Vec<FeatureShape>,
    logits: Tensor,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

impl Network {
    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.ndim() < 2 || batch.shape()[1..] != *self.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "batch of shape {:?} does not match network input {:?}",
                batch.shape(),
                self.input_shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Logits for a batch. Eval mode is a pure function of the parameters.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let shapes = self.feature_shapes();
        let mut x = batch.data().to_vec();
        for i in 0..self.layers().len() {
            x = self.layer_forward(i, x, shapes[i], n, mode, None);
        }
        Tensor::from_parts(vec![n, self.num_classes()], x).check_finite("forward")
    }

    /// Train-mode forward that keeps what backward needs.
    pub fn forward_traced(&self, batch: &Tensor) -> Result<Trace> {
        let n = self.check_batch(batch)?;
        let shapes = self.feature_shapes();
        let mut caches = Vec::with_capacity(self.layers().len());
        let mut x = batch.data().to_vec();
        for i in 0..self.layers().len() {
            x = self.layer_forward(i, x, shapes[i], n, Mode::Train, Some(&mut caches));
        }
        let logits = Tensor::from_parts(vec![n, self.num_classes()], x);
        Ok(Trace { batch: n, caches, shapes, logits })
    }

    fn layer_forward(
        &self,
        idx: usize,
        x: Vec<f32>,
        in_shape: FeatureShape,
        n: usize,
        mode: Mode,
        caches: Option<&mut Vec<Cache>>,
    ) -> Vec<f32> {
        let layer = &self.layers()[idx];
        match layer.spec {
            LayerSpec::Linear { in_features, out_features } => {
                let (w, b) = (layer.params[0].data(), layer.params[1].data());
                let mut y = vec![0.0; n * out_features];
                kernels::gemm_nt(n, in_features, out_features, &x, w, &mut y);
                for row in y.chunks_mut(out_features) {
                    for (v, &bv) in row.iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                if let Some(c) = caches {
                    c.push(Cache::Linear { input: x });
                }
                y
            }
            LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding, .. } => {
                let FeatureShape::Image { c, h, w } = in_shape else { unreachable!() };
                let geom = ConvGeom::new(c, h, w, kernel_h, kernel_w, stride, padding).expect("validated");
                let mut y = vec![0.0; n * out_channels * geom.out_len()];
                kernels::conv_forward(
                    &geom,
                    n,
                    out_channels,
                    &x,
                    layer.params[0].data(),
                    Some(layer.params[1].data()),
                    &mut y,
                );
                if let Some(cs) = caches {
                    cs.push(Cache::Conv { input: x, geom });
                }
                y
            }
            LayerSpec::BatchNorm2d { channels } => {
                let FeatureShape::Image { h, w, .. } = in_shape else { unreachable!() };
                let plane = h * w;
                let (gamma, beta) = (layer.params[0].data(), layer.params[1].data());
                let mut y = x;
                match mode {
                    Mode::Eval => {
                        let (rm, rv) = (layer.buffers[0].data(), layer.buffers[1].data());
                        for s in 0..n {
                            for ch in 0..channels {
                                let scale = gamma[ch] / (rv[ch] + BN_EPS).sqrt();
                                let start = (s * channels + ch) * plane;
                                for v in &mut y[start..start + plane] {
                                    *v = (*v - rm[ch]) * scale + beta[ch];
                                }
                            }
                        }
                        debug_assert!(caches.is_none(), "traced forward always runs in train mode");
                        y
                    }
                    Mode::Train => {
                        let count = n * plane;
                        let mut mean = vec![0.0f32; channels];
                        let mut var = vec![0.0f32; channels];
                        for ch in 0..channels {
                            let mut acc = 0.0f64;
                            for s in 0..n {
                                let start = (s * channels + ch) * plane;
                                acc += y[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
                            }
                            let m = acc / count as f64;
                            let mut sq = 0.0f64;
                            for s in 0..n {
                                let start = (s * channels + ch) * plane;
                                sq += y[start..start + plane].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                            }
                            mean[ch] = m as f32;
                            var[ch] = (sq / count as f64) as f32;
                        }
                        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        let mut xhat = vec![0.0; y.len()];
                        for s in 0..n {
                            for ch in 0..channels {
                                let start = (s * channels + ch) * plane;
                                for p in start..start + plane {
                                    let xh = (y[p] - mean[ch]) * inv_std[ch];
                                    xhat[p] = xh;
                                    y[p] = xh * gamma[ch] + beta[ch];
                                }
                            }
                        }
                        if let Some(cs) = caches {
                            cs.push(Cache::BatchNorm { xhat, inv_std, mean, var, count });
                        }
                        y
                    }
                }
            }
            LayerSpec::MaxPool2d { window } => {
                let FeatureShape::Image { c, h, w } = in_shape else { unreachable!() };
                let (oh, ow) = (h / window, w / window);
                let in_len = c * h * w;
                let mut y = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0u32; y.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f32::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let p = base + (oy * window + dy) * w + ox * window + dx;
                                        // Strict comparison keeps the first maximum.
                                        if x[p] > best {
                                            best = x[p];
                                            best_idx = p;
                                        }
                                    }
                                }
                                let o = ((s * c + ch) * oh + oy) * ow + ox;
                                y[o] = best;
                                argmax[o] = best_idx as u32;
                            }
                        }
                    }
                }
                if let Some(cs) = caches {
                    cs.push(Cache::Pool { argmax, in_len: n * in_len });
                }
                y
            }
            LayerSpec::Flatten => {
                if let Some(cs) = caches {
                    cs.push(Cache::Flatten);
                }
                x
            }
            LayerSpec::Relu => {
                let y: Vec<f32> = x.into_iter().map(|v| v.max(0.0)).collect();
                if let Some(cs) = caches {
                    cs.push(Cache::Relu { output: y.clone() });
                }
                y
            }
        }
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits).
    pub fn backward_from_trace(&self, trace: &Trace, dlogits: &[f32]) -> Gradients {
        let n = trace.batch;
        let mut grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers().len());
        let mut dy = dlogits.to_vec();
        for idx in (0..self.layers().len()).rev() {
            let layer = &self.layers()[idx];
            let need_dx = idx > 0;
            let (layer_grads, dx) = match (&layer.spec, &trace.caches[idx]) {
                (&LayerSpec::Linear { in_features, out_features }, Cache::Linear { input }) => {
                    let mut dw = vec![0.0; out_features * in_features];
                    kernels::gemm_tn_acc(out_features, n, in_features, &dy, input, &mut dw);
                    let mut db = vec![0.0; out_features];
                    for row in dy.chunks(out_features) {
                        for (g, &v) in db.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    let dx = if need_dx {
                        let mut dx = vec![0.0; n * in_features];
                        kernels::gemm_nn(n, out_features, in_features, &dy, layer.params[0].data(), &mut dx);
                        dx
                    } else {
                        Vec::new()
                    };
                    (
                        vec![
                            Tensor::from_parts(vec![out_features, in_features], dw),
                            Tensor::from_parts(vec![out_features], db),
                        ],
                        dx,
                    )
                }
                (&LayerSpec::Conv2d { out_channels, .. }, Cache::Conv { input, geom }) => {
                    let p = geom.out_len();
                    let patch = geom.patch_len();
                    let w = layer.params[0].data();
                    let mut dw = vec![0.0f32; out_channels * patch];
                    let mut db = vec![0.0f32; out_channels];
                    let mut dx = if need_dx { vec![0.0; n * geom.in_len()] } else { Vec::new() };
                    let mut cols = vec![0.0; patch * p];
                    let mut dcols = vec![0.0; patch * p];
                    for s in 0..n {
                        kernels::im2col(geom, &input[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
                        let dout = &dy[s * out_channels * p..(s + 1) * out_channels * p];
                        for o in 0..out_channels {
                            let drow = &dout[o * p..(o + 1) * p];
                            db[o] += drow.iter().sum::<f32>();
                            for r in 0..patch {
                                let crow = &cols[r * p..(r + 1) * p];
                                let mut acc = 0.0f32;
                                for (a, b) in drow.iter().zip(crow) {
                                    acc += a * b;
                                }
                                dw[o * patch + r] += acc;
                            }
                        }
                        if need_dx {
                            dcols.fill(0.0);
                            kernels::gemm_tn_acc(patch, out_channels, p, w, dout, &mut dcols);
                            kernels::col2im(geom, &dcols, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                        }
                    }
                    (
                        vec![
                            Tensor::from_parts(layer.params[0].shape().to_vec(), dw),
                            Tensor::from_parts(vec![out_channels], db),
                        ],
                        dx,
                    )
                }
                (&LayerSpec::BatchNorm2d { channels }, Cache::BatchNorm { xhat, inv_std, count, .. }) => {
                    let plane = count / n;
                    let gamma = layer.params[0].data();
                    let mut dgamma = vec![0.0f32; channels];
                    let mut dbeta = vec![0.0f32; channels];
                    let mut dx = vec![0.0; dy.len()];
                    let m = *count as f32;
                    for ch in 0..channels {
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                        for s in 0..n {
                            let start = (s * channels + ch) * plane;
                            for p in start..start + plane {
                                sum_dy += dy[p] as f64;
                                sum_dy_xhat += (dy[p] * xhat[p]) as f64;
                            }
                        }
                        dgamma[ch] = sum_dy_xhat as f32;
                        dbeta[ch] = sum_dy as f32;
                        let (sum_dxhat, sum_dxhat_xhat) =
                            ((sum_dy as f32) * gamma[ch], (sum_dy_xhat as f32) * gamma[ch]);
                        let k = inv_std[ch] / m;
                        for s in 0..n {
                            let start = (s * channels + ch) * plane;
                            for p in start..start + plane {
                                let dxhat = dy[p] * gamma[ch];
                                dx[p] = k * (m * dxhat - sum_dxhat - xhat[p] * sum_dxhat_xhat);
                            }
                        }
                    }
                    (
                        vec![
                            Tensor::from_parts(vec![channels], dgamma),
                            Tensor::from_parts(vec![channels], dbeta),
                        ],
                        dx,
                    )
                }
                (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, in_len }) => {
                    let mut dx = vec![0.0; *in_len];
                    for (&src, &g) in argmax.iter().zip(&dy) {
                        dx[src as usize] += g;
                    }
                    (Vec::new(), dx)
                }
                (LayerSpec::Relu, Cache::Relu { output }) => {
                    let dx = dy.iter().zip(output).map(|(&g, &o)| if o > 0.0 { g } else { 0.0 }).collect();
                    (Vec::new(), dx)
                }
                (LayerSpec::Flatten, Cache::Flatten) => (Vec::new(), std::mem::take(&mut dy)),
                _ => unreachable!("trace does not belong to this network"),
            };
            grads.push(layer_grads);
            dy = dx;
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Train-mode loss and parameter gradients for one batch.
    pub fn backward(&self, batch: &Tensor, labels: &[usize], loss: &Loss) -> Result<(f32, Gradients, Trace)> {
        let trace = self.forward_traced(batch)?;
        if labels.len() != trace.batch {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                trace.batch
            )));
        }
        let (value, dlogits) = match loss {
            Loss::CrossEntropy => loss::cross_entropy_with_grad(&trace.logits, labels)?,
            Loss::Distill { teacher_logits, config } => {
                loss::kd_loss_with_grad(&trace.logits, teacher_logits, labels, config)?
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        let grads = self.backward_from_trace(&trace, &dlogits);
        Ok((value, grads, trace))
    }

    /// Folds a training batch's BatchNorm statistics into the running buffers.
    pub fn absorb_batch_stats(&mut self, trace: &Trace) {
        debug_assert_eq!(trace.shapes.len(), self.layers().len() + 1);
        for (layer, cache) in self.layers_mut().iter_mut().zip(&trace.caches) {
            if let Cache::BatchNorm { mean, var, count, .. } = cache {
                let unbias = if *count > 1 { *count as f32 / (*count as f32 - 1.0) } else { 1.0 };
                let (rm, rv) = layer.buffers.split_at_mut(1);
                for ((m, v), (&bm, &bv)) in rm[0]
                    .data_mut()
                    .iter_mut()
                    .zip(rv[0].data_mut().iter_mut())
                    .zip(mean.iter().zip(var))
                {
                    *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * bm;
                    *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * bv * unbias;
                }
            }
        }
    }
}

/// Shape after every layer; exposed for tests that compose layers by hand.
pub fn shape_chain(input: FeatureShape, specs: &[LayerSpec]) -> Result<Vec<FeatureShape>> {
    let mut out = vec![input];
    for s in specs {
        out.push(infer_shape(s, *out.last().unwrap())?);
    }
    Ok(out)
}
