//! Structured network ops on the tape: 3x3 convolution, 2x2 max-pooling,
//! and fused batch normalization.

use super::tape::{BnSaved, BnStats, ConvDims, Node, Op, Tape, Var};
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

impl Tape {
    /// 2-D convolution with a fixed 3x3 kernel, stride 1, zero padding 1.
    /// `x` is `[B,C,H,W]`, `kernel` is `[F,C,3,3]`, output is `[B,F,H,W]`.
    /// No bias term; a normalization layer is expected to follow.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (batch, c_in, height, width) = self.value(x).rank4("conv2d")?;
        let (c_out, kc, kh, kw) = self.value(kernel).rank4("conv2d")?;
        if kc != c_in || kh != 3 || kw != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![batch, c_in, height, width],
                rhs: vec![c_out, kc, kh, kw],
            });
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut data = vec![0.0; batch * c_out * height * width];
        for b in 0..batch {
            for f in 0..c_out {
                for i in 0..height {
                    for j in 0..width {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for di in 0..3 {
                                let p = (i + di).wrapping_sub(1);
                                if p >= height {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let q = (j + dj).wrapping_sub(1);
                                    if q >= width {
                                        continue;
                                    }
                                    let xi = ((b * c_in + c) * height + p) * width + q;
                                    let ki = ((f * c_in + c) * 3 + di) * 3 + dj;
                                    acc += xv[xi] * kv[ki];
                                }
                            }
                        }
                        data[((b * c_out + f) * height + i) * width + j] = acc;
                    }
                }
            }
        }
        ensure_finite(&data, "conv2d")?;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            height,
            width,
        };
        let value = Tensor::new(vec![batch, c_out, height, width], data)?;
        Ok(self.push_node(value, Op::Conv2d { x, kernel, dims }))
    }

    /// 2x2 max-pooling with stride 2 on `[B,C,H,W]`; trailing odd rows and
    /// columns are dropped. Ties go to the first element in scan order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (batch, chans, height, width) = self.value(x).rank4("maxpool2d")?;
        if height < 2 || width < 2 {
            return Err(Error::contract(
                "maxpool2d",
                format!("spatial dims {height}x{width} too small to pool"),
            ));
        }
        let (oh, ow) = (height / 2, width / 2);
        let xv = self.value(x).data();
        let mut data = vec![0.0; batch * chans * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        for b in 0..batch {
            for c in 0..chans {
                let base = (b * chans + c) * height * width;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best_idx = base + (2 * oi) * width + 2 * oj;
                        let mut best = xv[best_idx];
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (2 * oi + di) * width + 2 * oj + dj;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * chans + c) * oh + oi) * ow + oj;
                        data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        ensure_finite(&data, "maxpool2d")?;
        let value = Tensor::new(vec![batch, chans, oh, ow], data)?;
        Ok(self.push_node(value, Op::MaxPool2d { x, argmax }))
    }

    /// Fused batch normalization over the batch (and spatial) axes.
    ///
    /// `x` is `[B,D]` or `[B,C,H,W]`; `gamma` and `beta` match the feature
    /// axis. Training mode normalizes by biased batch statistics and folds
    /// the batch mean and unbiased variance into the running stats with the
    /// given momentum; eval mode normalizes by the running stats unchanged.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, features, spatial) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: xs,
                    rhs: vec![],
                })
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [features] {
                return Err(Error::contract(
                    "batchnorm",
                    format!("{name} shape {:?} != [{features}]", self.value(v).shape()),
                ));
            }
        }
        let m = batch * spatial;
        let train = matches!(stats, BnStats::Train { .. });
        if train && batch < 2 {
            return Err(Error::DegenerateBatch {
                op: "batchnorm",
                batch,
                min: 2,
            });
        }

        let xv = self.value(x).data();
        let feat_of = |k: usize| (k / spatial) % features;

        let (mean, invstd) = match stats {
            BnStats::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if running_mean.len() != features || running_var.len() != features {
                    return Err(Error::contract("batchnorm", "running stats length mismatch"));
                }
                let mut mean = vec![0.0; features];
                for (k, v) in xv.iter().enumerate() {
                    mean[feat_of(k)] += v;
                }
                for mu in &mut mean {
                    *mu /= m as f64;
                }
                let mut var = vec![0.0; features];
                for (k, v) in xv.iter().enumerate() {
                    let d = v - mean[feat_of(k)];
                    var[feat_of(k)] += d * d;
                }
                for v in &mut var {
                    *v /= m as f64;
                }
                for f in 0..features {
                    let unbiased = var[f] * m as f64 / (m - 1) as f64;
                    running_mean[f] = (1.0 - momentum) * running_mean[f] + momentum * mean[f];
                    running_var[f] = (1.0 - momentum) * running_var[f] + momentum * unbiased;
                }
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, invstd)
            }
            BnStats::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != features || running_var.len() != features {
                    return Err(Error::contract("batchnorm", "running stats length mismatch"));
                }
                let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), invstd)
            }
        };

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut data = vec![0.0; xv.len()];
        for (k, v) in xv.iter().enumerate() {
            let f = feat_of(k);
            let h = (v - mean[f]) * invstd[f];
            xhat[k] = h;
            data[k] = gv[f] * h + bv[f];
        }
        ensure_finite(&data, "batchnorm")?;
        let saved = BnSaved {
            xhat,
            invstd,
            train,
            features,
            spatial,
        };
        let value = Tensor::new(xs, data)?;
        Ok(self.push_node(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        ))
    }
}

pub(crate) fn step_backward_nn(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    i: usize,
    g: &[f64],
) -> Result<()> {
    let numel = |v: Var| nodes[v.0].value.numel();
    match &nodes[i].op {
        Op::Conv2d { x, kernel, dims } => {
            let xv = nodes[x.0].value.data();
            let kv = nodes[kernel.0].value.data();
            let mut dx = vec![0.0; numel(*x)];
            let mut dk = vec![0.0; numel(*kernel)];
            let ConvDims {
                batch,
                c_in,
                c_out,
                height,
                width,
            } = *dims;
            for b in 0..batch {
                for f in 0..c_out {
                    for oi in 0..height {
                        for oj in 0..width {
                            let go = g[((b * c_out + f) * height + oi) * width + oj];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for di in 0..3 {
                                    let p = (oi + di).wrapping_sub(1);
                                    if p >= height {
                                        continue;
                                    }
                                    for dj in 0..3 {
                                        let q = (oj + dj).wrapping_sub(1);
                                        if q >= width {
                                            continue;
                                        }
                                        let xi = ((b * c_in + c) * height + p) * width + q;
                                        let ki = ((f * c_in + c) * 3 + di) * 3 + dj;
                                        dx[xi] += go * kv[ki];
                                        dk[ki] += go * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, &dx);
            accumulate(grads, nodes, *kernel, &dk);
        }
        Op::MaxPool2d { x, argmax } => {
            let buf = grads[x.0].get_or_insert_with(|| vec![0.0; nodes[x.0].value.numel()]);
            for (k, &src) in argmax.iter().enumerate() {
                buf[src] += g[k];
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let BnSaved {
                xhat,
                invstd,
                train,
                features,
                spatial,
                ..
            } = saved;
            let (features, spatial) = (*features, *spatial);
            let feat_of = |k: usize| (k / spatial) % features;
            let m = xhat.len() / features;

            let mut sum_dy = vec![0.0; features];
            let mut sum_dy_xhat = vec![0.0; features];
            for (k, gi) in g.iter().enumerate() {
                let f = feat_of(k);
                sum_dy[f] += gi;
                sum_dy_xhat[f] += gi * xhat[k];
            }
            accumulate(grads, nodes, *beta, &sum_dy);
            accumulate(grads, nodes, *gamma, &sum_dy_xhat);

            let gv = nodes[gamma.0].value.data();
            let mut dx = vec![0.0; g.len()];
            if *train {
                let mf = m as f64;
                for (k, gi) in g.iter().enumerate() {
                    let f = feat_of(k);
                    dx[k] = gv[f] * invstd[f] / mf
                        * (mf * gi - sum_dy[f] - xhat[k] * sum_dy_xhat[f]);
                }
            } else {
                for (k, gi) in g.iter().enumerate() {
                    let f = feat_of(k);
                    dx[k] = gi * gv[f] * invstd[f];
                }
            }
            accumulate(grads, nodes, *x, &dx);
        }
        _ => unreachable!("step_backward_nn called for a non-nn op"),
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: &[f64]) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    for (o, c) in buf.iter_mut().zip(contrib) {
        *o += c;
    }
}
