//! Reverse-mode autodiff over a flat op tape.
//!
//! Ops append records in creation order, which is already a topological
//! order; `backward` walks them in exact reverse. A detach record stops
//! gradient flow: nothing upstream of it ever receives a gradient.

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{OmError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Detach { x: usize },
    Conv3d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Deconv3d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Sigmoid { x: usize },
    SoftmaxChannels { x: usize },
    SoftmaxLoss { logits: usize, labels: Vec<u8>, probs: Vec<f32> },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    L1Normalize { x: usize },
    ScaleChannels { f: usize, m: usize },
    ChannelWeightedSum { f: usize, p: usize },
    SumChannels { x: usize, classes: Vec<usize> },
    ProbWeightedMerge { st: usize, sn: usize, pt: usize, pn: usize },
    GlobalAvgPool { x: usize },
    BiasAdd { x: usize, b: usize },
    ConcatBatch { parts: Vec<usize> },
    SliceBatch { x: usize, start: usize, len: usize },
    GatherBatch { x: usize, indices: Vec<usize> },
    WeightedSum { x: usize, weights: Vec<f32> },
}

/// A computation tape: values, op records, and (after `backward`) gradients.
#[derive(Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Number of fixed reduction chunks for sample-parallel weight gradients.
/// Constant (not thread-count dependent) so results are deterministic.
const GRAD_CHUNKS: usize = 8;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` w.r.t. this node, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    /// Insert a tensor as a leaf; gradient tracking follows `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Leaf that never receives gradients (network inputs, label volumes).
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    /// Copy a parameter tensor in as a gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.push(Op::Leaf, c, true)
    }

    /// Stop-gradient marker: value passes through, gradients do not.
    pub fn detach(&mut self, x: Var) -> Var {
        let mut v = self.values[x.0].clone();
        v.requires_grad = false;
        self.push(Op::Detach { x: x.0 }, v, false)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (geom, vd) = self.conv_like_geom("conv3d", x, w, b, stride, pad)?;
        let geom = kernels::conv3d_geometry(
            geom.in_dims, geom.kernel, geom.cin, geom.cout, stride, pad,
        )?;
        let out_shape = volume_shape(geom.out_dims, geom.cout, vd.batched, vd.batch);
        let mut out = Tensor::zeros(&out_shape);
        let in_len = geom.in_dims.iter().product::<usize>() * geom.cin;
        let out_len = geom.out_dims.iter().product::<usize>() * geom.cout;
        let xb = self.values[x.0].data();
        let wb = self.values[w.0].data();
        let bb = self.values[b.0].data();
        out.data_mut()
            .par_chunks_mut(out_len)
            .zip(xb.par_chunks(in_len))
            .for_each(|(o, xi)| kernels::conv3d_forward(xi, wb, bb, &geom, o));
        out.assert_finite("conv3d")?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(Op::Conv3d { x: x.0, w: w.0, b: b.0, geom }, out, needs))
    }

    pub fn deconv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (geom, vd) = self.conv_like_geom("deconv3d", x, w, b, stride, pad)?;
        let geom = kernels::deconv3d_geometry(
            geom.in_dims, geom.kernel, geom.cin, geom.cout, stride, pad,
        )?;
        let out_shape = volume_shape(geom.out_dims, geom.cout, vd.batched, vd.batch);
        let mut out = Tensor::zeros(&out_shape);
        let in_len = geom.in_dims.iter().product::<usize>() * geom.cin;
        let out_len = geom.out_dims.iter().product::<usize>() * geom.cout;
        let xb = self.values[x.0].data();
        let wb = self.values[w.0].data();
        let bb = self.values[b.0].data();
        out.data_mut()
            .par_chunks_mut(out_len)
            .zip(xb.par_chunks(in_len))
            .for_each(|(o, xi)| kernels::deconv3d_forward(xi, wb, bb, &geom, o));
        out.assert_finite("deconv3d")?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(Op::Deconv3d { x: x.0, w: w.0, b: b.0, geom }, out, needs))
    }

    fn conv_like_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        _stride: [usize; 3],
        _pad: [usize; 3],
    ) -> Result<(ConvGeom, super::VolumeDims)> {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let vd = xv.as_volume()?;
        if wv.order() != 5 {
            return Err(OmError::ShapeMismatch {
                op,
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let ws = wv.shape();
        let (kernel, cin, cout) = ([ws[0], ws[1], ws[2]], ws[3], ws[4]);
        if cin != vd.channels || bv.shape() != [cout] {
            return Err(OmError::ShapeMismatch {
                op,
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        Ok((
            ConvGeom {
                in_dims: vd.spatial,
                out_dims: [0; 3],
                kernel,
                cin,
                cout,
                stride: [1; 3],
                pad: [0; 3],
            },
            vd,
        ))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let needs = self.needs_grad[x.0];
        self.push(Op::Relu { x: x.0 }, out, needs)
    }

    /// Elementwise sum; used for residual skips and for summing scalar losses.
    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(OmError::ShapeMismatch {
                op: "residual_add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        out.assert_finite("residual_add")?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let needs = self.needs_grad[x.0];
        self.push(Op::Sigmoid { x: x.0 }, out, needs)
    }

    /// Per-voxel softmax over the channel axis, max-subtracted for stability.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let vd = xv.as_volume()?;
        if vd.channels == 0 {
            return Err(OmError::InvalidArgument {
                op: "softmax_channels",
                msg: "zero channels".into(),
            });
        }
        let voxels = vd.voxels();
        let mut out = vec![0f32; xv.len()];
        let xb = xv.data();
        for n in 0..vd.batch {
            let base = n * vd.sample_len();
            let sample = &xb[base..base + vd.sample_len()];
            let osample = &mut out[base..base + vd.sample_len()];
            softmax_sample(sample, osample, voxels, vd.channels);
        }
        let out = Tensor::new(xv.shape(), out)?;
        out.assert_finite("softmax_channels")?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(Op::SoftmaxChannels { x: x.0 }, out, needs))
    }

    /// Mean over all voxels of -log p(true class). Labels are per voxel,
    /// sample-contiguous, x fastest.
    pub fn softmax_with_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let vd = lv.as_volume()?;
        let voxels = vd.voxels();
        let total = voxels * vd.batch;
        if labels.len() != total {
            return Err(OmError::ShapeMismatch {
                op: "softmax_with_loss",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l as usize >= vd.channels {
                return Err(OmError::LabelOutOfRange {
                    label: l,
                    classes: vd.channels,
                });
            }
        }
        let mut probs = vec![0f32; lv.len()];
        let lb = lv.data();
        for n in 0..vd.batch {
            let base = n * vd.sample_len();
            softmax_sample(
                &lb[base..base + vd.sample_len()],
                &mut probs[base..base + vd.sample_len()],
                voxels,
                vd.channels,
            );
        }
        let mut acc = 0f64;
        for n in 0..vd.batch {
            let base = n * vd.sample_len();
            for v in 0..voxels {
                let c = labels[n * voxels + v] as usize;
                // clamp: a fully saturated wrong prediction would otherwise
                // produce -inf from an underflowed probability
                let p = probs[base + c * voxels + v].max(1e-30);
                acc -= (p as f64).ln();
            }
        }
        let loss = Tensor::scalar((acc / total as f64) as f32);
        loss.assert_finite("softmax_with_loss")?;
        let needs = self.needs_grad[logits.0];
        Ok(self.push(
            Op::SoftmaxLoss {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            loss,
            needs,
        ))
    }

    /// Column-major matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.order() != 2 || bv.order() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(OmError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        let mut out = vec![0f32; m * n];
        for j in 0..n {
            let ocol = &mut out[m * j..m * (j + 1)];
            for l in 0..k {
                let s = bv.data()[l + k * j];
                let acol = &av.data()[m * l..m * (l + 1)];
                for (o, &x) in ocol.iter_mut().zip(acol) {
                    *o += s * x;
                }
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        out.assert_finite("matmul")?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0, m, k, n }, out, needs))
    }

    /// Divide by the signed sum, per column for 2D inputs. A zero sum is a
    /// degenerate-guidance error rather than a silent NaN.
    pub fn l1_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let (rows, cols) = match xv.order() {
            1 => (xv.shape()[0], 1),
            2 => (xv.shape()[0], xv.shape()[1]),
            _ => {
                return Err(OmError::InvalidArgument {
                    op: "l1_normalize",
                    msg: format!("expected vector or matrix, got {:?}", xv.shape()),
                })
            }
        };
        let mut out = vec![0f32; xv.len()];
        for j in 0..cols {
            let col = &xv.data()[rows * j..rows * (j + 1)];
            let s = kernels::sum_fixed(col);
            if s == 0.0 {
                return Err(OmError::DegenerateGuidance(
                    "l1_normalize: zero-sum vector".into(),
                ));
            }
            for (o, &v) in out[rows * j..rows * (j + 1)].iter_mut().zip(col) {
                *o = v / s;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        out.assert_finite("l1_normalize")?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(Op::L1Normalize { x: x.0 }, out, needs))
    }

    /// Multiply each channel plane of `f` by its weight; `m` is `[C]` shared
    /// across the batch or `[C,N]` per sample.
    pub fn scale_channels(&mut self, f: Var, m: Var) -> Result<Var> {
        let fv = &self.values[f.0];
        let mv = &self.values[m.0];
        let vd = fv.as_volume()?;
        let per_sample = match mv.order() {
            1 if mv.shape()[0] == vd.channels => false,
            2 if mv.shape()[0] == vd.channels && mv.shape()[1] == vd.batch => true,
            _ => {
                return Err(OmError::ShapeMismatch {
                    op: "scale_channels",
                    lhs: fv.shape().to_vec(),
                    rhs: mv.shape().to_vec(),
                })
            }
        };
        let voxels = vd.voxels();
        let mut out = vec![0f32; fv.len()];
        for n in 0..vd.batch {
            for c in 0..vd.channels {
                let w = if per_sample {
                    mv.data()[c + vd.channels * n]
                } else {
                    mv.data()[c]
                };
                let base = voxels * (c + vd.channels * n);
                for (o, &x) in out[base..base + voxels]
                    .iter_mut()
                    .zip(&fv.data()[base..base + voxels])
                {
                    *o = w * x;
                }
            }
        }
        let out = Tensor::new(fv.shape(), out)?;
        out.assert_finite("scale_channels")?;
        let needs = self.any_needs(&[f, m]);
        Ok(self.push(Op::ScaleChannels { f: f.0, m: m.0 }, out, needs))
    }

    /// Per-channel probability-weighted spatial sum: `out[c] = <f_c, p>`,
    /// one column per batch sample.
    pub fn channel_weighted_sum(&mut self, f: Var, p: Var) -> Result<Var> {
        let fv = &self.values[f.0];
        let pv = &self.values[p.0];
        let vd = fv.as_volume()?;
        let pd = pv.as_volume()?;
        if pd.spatial != vd.spatial || pd.channels != 1 || pd.batch != vd.batch {
            return Err(OmError::ShapeMismatch {
                op: "channel_weighted_sum",
                lhs: fv.shape().to_vec(),
                rhs: pv.shape().to_vec(),
            });
        }
        let voxels = vd.voxels();
        let mut out = vec![0f32; vd.channels * vd.batch];
        for n in 0..vd.batch {
            let pplane = &pv.data()[voxels * n..voxels * (n + 1)];
            for c in 0..vd.channels {
                let base = voxels * (c + vd.channels * n);
                out[c + vd.channels * n] = dot_f64(&fv.data()[base..base + voxels], pplane);
            }
        }
        let out = Tensor::new(&[vd.channels, vd.batch], out)?;
        out.assert_finite("channel_weighted_sum")?;
        let needs = self.any_needs(&[f, p]);
        Ok(self.push(Op::ChannelWeightedSum { f: f.0, p: p.0 }, out, needs))
    }

    /// Sum the selected channel planes into a one-channel volume.
    pub fn sum_channels(&mut self, x: Var, classes: &[usize]) -> Result<Var> {
        let xv = &self.values[x.0];
        let vd = xv.as_volume()?;
        if classes.is_empty() || classes.iter().any(|&c| c >= vd.channels) {
            return Err(OmError::InvalidArgument {
                op: "sum_channels",
                msg: format!("invalid class set {:?} for {} channels", classes, vd.channels),
            });
        }
        let voxels = vd.voxels();
        let mut out = vec![0f32; voxels * vd.batch];
        for n in 0..vd.batch {
            let oplane = &mut out[voxels * n..voxels * (n + 1)];
            for &c in classes {
                let base = voxels * (c + vd.channels * n);
                for (o, &v) in oplane.iter_mut().zip(&xv.data()[base..base + voxels]) {
                    *o += v;
                }
            }
        }
        let out = Tensor::new(&vd.with_channels(1), out)?;
        out.assert_finite("sum_channels")?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(
            Op::SumChannels { x: x.0, classes: classes.to_vec() },
            out,
            needs,
        ))
    }

    /// Voxel-wise weighted average of two score maps:
    /// `out[v,c] = pt[v]*st[v,c] + pn[v]*sn[v,c]`.
    pub fn prob_weighted_merge(&mut self, st: Var, sn: Var, pt: Var, pn: Var) -> Result<Var> {
        let sv = &self.values[st.0];
        let vd = sv.as_volume()?;
        for (name, other) in [("sn", sn)] {
            let _ = name;
            if self.values[other.0].shape() != sv.shape() {
                return Err(OmError::ShapeMismatch {
                    op: "prob_weighted_merge",
                    lhs: sv.shape().to_vec(),
                    rhs: self.values[other.0].shape().to_vec(),
                });
            }
        }
        for p in [pt, pn] {
            let pd = self.values[p.0].as_volume()?;
            if pd.spatial != vd.spatial || pd.channels != 1 || pd.batch != vd.batch {
                return Err(OmError::ShapeMismatch {
                    op: "prob_weighted_merge",
                    lhs: sv.shape().to_vec(),
                    rhs: self.values[p.0].shape().to_vec(),
                });
            }
        }
        let voxels = vd.voxels();
        let mut out = vec![0f32; sv.len()];
        let (stb, snb) = (self.values[st.0].data(), self.values[sn.0].data());
        let (ptb, pnb) = (self.values[pt.0].data(), self.values[pn.0].data());
        for n in 0..vd.batch {
            let ptp = &ptb[voxels * n..voxels * (n + 1)];
            let pnp = &pnb[voxels * n..voxels * (n + 1)];
            for c in 0..vd.channels {
                let base = voxels * (c + vd.channels * n);
                let o = &mut out[base..base + voxels];
                let s_t = &stb[base..base + voxels];
                let s_n = &snb[base..base + voxels];
                for i in 0..voxels {
                    o[i] = ptp[i] * s_t[i] + pnp[i] * s_n[i];
                }
            }
        }
        let out = Tensor::new(sv.shape(), out)?;
        out.assert_finite("prob_weighted_merge")?;
        let needs = self.any_needs(&[st, sn, pt, pn]);
        Ok(self.push(
            Op::ProbWeightedMerge { st: st.0, sn: sn.0, pt: pt.0, pn: pn.0 },
            out,
            needs,
        ))
    }

    /// Mean of each channel plane: `[W,H,L,C,(N)] -> [C,N]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let vd = xv.as_volume()?;
        let voxels = vd.voxels();
        let mut out = vec![0f32; vd.channels * vd.batch];
        for n in 0..vd.batch {
            for c in 0..vd.channels {
                let base = voxels * (c + vd.channels * n);
                out[c + vd.channels * n] =
                    kernels::sum_fixed(&xv.data()[base..base + voxels]) / voxels as f32;
            }
        }
        let out = Tensor::new(&[vd.channels, vd.batch], out)?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(Op::GlobalAvgPool { x: x.0 }, out, needs))
    }

    /// Add a `[k]` bias vector to every column of a `[k,(n)]` tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let bv = &self.values[b.0];
        let rows = xv.shape()[0];
        if bv.shape() != [rows] || xv.order() > 2 {
            return Err(OmError::ShapeMismatch {
                op: "bias_add",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.len() / rows;
        let mut out = vec![0f32; xv.len()];
        for j in 0..cols {
            for i in 0..rows {
                out[i + rows * j] = xv.data()[i + rows * j] + bv.data()[i];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let needs = self.any_needs(&[x, b]);
        Ok(self.push(Op::BiasAdd { x: x.0, b: b.0 }, out, needs))
    }

    /// Concatenate samples along the batch axis. Parts must share the sample
    /// shape `[W,H,L,C]`; the result is 5D.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(OmError::InvalidArgument {
                op: "concat_batch",
                msg: "no parts".into(),
            });
        }
        let first = self.values[parts[0].0].as_volume()?;
        let mut total = 0usize;
        for &p in parts {
            let vd = self.values[p.0].as_volume()?;
            if vd.spatial != first.spatial || vd.channels != first.channels {
                return Err(OmError::ShapeMismatch {
                    op: "concat_batch",
                    lhs: self.values[parts[0].0].shape().to_vec(),
                    rhs: self.values[p.0].shape().to_vec(),
                });
            }
            total += vd.batch;
        }
        let mut data = Vec::with_capacity(first.sample_len() * total);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let shape = vec![
            first.spatial[0],
            first.spatial[1],
            first.spatial[2],
            first.channels,
            total,
        ];
        let out = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|&p| self.needs_grad[p.0]);
        Ok(self.push(
            Op::ConcatBatch { parts: parts.iter().map(|v| v.0).collect() },
            out,
            needs,
        ))
    }

    /// Contiguous batch slice `[start, start+len)`; result stays 5D.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.values[x.0];
        let vd = xv.as_volume()?;
        if !vd.batched || start + len > vd.batch || len == 0 {
            return Err(OmError::InvalidArgument {
                op: "slice_batch",
                msg: format!(
                    "slice [{start}, {}) out of range for batch {}",
                    start + len,
                    vd.batch
                ),
            });
        }
        let sl = vd.sample_len();
        let data = xv.data()[sl * start..sl * (start + len)].to_vec();
        let shape = vec![vd.spatial[0], vd.spatial[1], vd.spatial[2], vd.channels, len];
        let out = Tensor::new(&shape, data)?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(Op::SliceBatch { x: x.0, start, len }, out, needs))
    }

    /// Gather arbitrary samples by index along the batch axis.
    pub fn gather_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = &self.values[x.0];
        let vd = xv.as_volume()?;
        if indices.is_empty() || indices.iter().any(|&i| i >= vd.batch) {
            return Err(OmError::InvalidArgument {
                op: "gather_batch",
                msg: format!("indices {:?} out of range for batch {}", indices, vd.batch),
            });
        }
        let sl = vd.sample_len();
        let mut data = Vec::with_capacity(sl * indices.len());
        for &i in indices {
            data.extend_from_slice(&xv.data()[sl * i..sl * (i + 1)]);
        }
        let shape = vec![
            vd.spatial[0],
            vd.spatial[1],
            vd.spatial[2],
            vd.channels,
            indices.len(),
        ];
        let out = Tensor::new(&shape, data)?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(
            Op::GatherBatch { x: x.0, indices: indices.to_vec() },
            out,
            needs,
        ))
    }

    /// Fixed-weight reduction to a scalar: `sum_i w[i] * x[i]`. The weights
    /// are constants, not graph values.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let xv = &self.values[x.0];
        if weights.len() != xv.len() {
            return Err(OmError::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = dot_f64(xv.data(), weights);
        let out = Tensor::scalar(s);
        out.assert_finite("weighted_sum")?;
        let needs = self.needs_grad[x.0];
        Ok(self.push(
            Op::WeightedSum { x: x.0, weights: weights.to_vec() },
            out,
            needs,
        ))
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of leaves remain
    /// readable via `grad`; intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(OmError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            });
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            if matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, node: usize) -> &mut Vec<f32> {
        let len = self.values[node].len();
        self.grads[node].get_or_insert_with(|| vec![0f32; len])
    }

    fn propagate(&mut self, node: usize, g: &[f32]) -> Result<()> {
        // records only ever reference earlier nodes; anything else is a
        // corrupted tape
        let check = |j: usize| -> Result<()> {
            if j >= node {
                Err(OmError::Internal(format!(
                    "op record {node} references later node {j}"
                )))
            } else {
                Ok(())
            }
        };
        match &self.ops[node] {
            Op::Leaf => {}
            // stop-gradient: the upstream node exists but never hears from us
            Op::Detach { x } => check(*x)?,
            Op::Conv3d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                check(x)?;
                let in_len = geom.in_dims.iter().product::<usize>() * geom.cin;
                let out_len = geom.out_dims.iter().product::<usize>() * geom.cout;
                let batch = self.values[x].len() / in_len;
                if self.needs_grad[x] {
                    let wb = self.values[w].data().to_vec();
                    // the kernel accumulates, so it can write straight into
                    // the (zero-initialized or partially filled) grad buffer
                    self.grad_buf(x)
                        .par_chunks_mut(in_len)
                        .zip(g.par_chunks(out_len))
                        .for_each(|(gi, go)| kernels::conv3d_backward_input(go, &wb, &geom, gi));
                }
                if self.needs_grad[w] || self.needs_grad[b] {
                    let xb = self.values[x].data();
                    let wlen = self.values[w].len();
                    let blen = self.values[b].len();
                    let (gw, gb) = batched_weight_grads(batch, wlen, blen, |range, gw, gb| {
                        for n in range {
                            kernels::conv3d_backward_weights(
                                &xb[in_len * n..in_len * (n + 1)],
                                &g[out_len * n..out_len * (n + 1)],
                                &geom,
                                gw,
                                gb,
                            );
                        }
                    });
                    if self.needs_grad[w] {
                        accumulate(self.grad_buf(w), &gw);
                    }
                    if self.needs_grad[b] {
                        accumulate(self.grad_buf(b), &gb);
                    }
                }
            }
            Op::Deconv3d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                check(x)?;
                let in_len = geom.in_dims.iter().product::<usize>() * geom.cin;
                let out_len = geom.out_dims.iter().product::<usize>() * geom.cout;
                let batch = self.values[x].len() / in_len;
                if self.needs_grad[x] {
                    let wb = self.values[w].data().to_vec();
                    self.grad_buf(x)
                        .par_chunks_mut(in_len)
                        .zip(g.par_chunks(out_len))
                        .for_each(|(gi, go)| kernels::deconv3d_backward_input(go, &wb, &geom, gi));
                }
                if self.needs_grad[w] || self.needs_grad[b] {
                    let xb = self.values[x].data();
                    let wlen = self.values[w].len();
                    let blen = self.values[b].len();
                    let (gw, gb) = batched_weight_grads(batch, wlen, blen, |range, gw, gb| {
                        for n in range {
                            kernels::deconv3d_backward_weights(
                                &xb[in_len * n..in_len * (n + 1)],
                                &g[out_len * n..out_len * (n + 1)],
                                &geom,
                                gw,
                                gb,
                            );
                        }
                    });
                    if self.needs_grad[w] {
                        accumulate(self.grad_buf(w), &gw);
                    }
                    if self.needs_grad[b] {
                        accumulate(self.grad_buf(b), &gb);
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.needs_grad[x] {
                    let len = self.values[x].len();
                    let buf = self.grads[x].get_or_insert_with(|| vec![0f32; len]);
                    for ((o, &v), &gi) in buf.iter_mut().zip(self.values[x].data()).zip(g) {
                        if v > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs_grad[a] {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs_grad[b] {
                    accumulate(self.grad_buf(b), g);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.needs_grad[x] {
                    let y = self.values[node].data();
                    let gx: Vec<f32> = y
                        .iter()
                        .zip(g)
                        .map(|(&yi, &gi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(self.grad_buf(x), &gx);
                }
            }
            Op::SoftmaxChannels { x } => {
                let x = *x;
                if self.needs_grad[x] {
                    let y = self.values[node].data();
                    let vd = self.values[node].as_volume()?;
                    let voxels = vd.voxels();
                    let mut gx = vec![0f32; y.len()];
                    for n in 0..vd.batch {
                        let base = n * vd.sample_len();
                        let mut dotbuf = vec![0f32; voxels];
                        for c in 0..vd.channels {
                            let off = base + voxels * c;
                            for v in 0..voxels {
                                dotbuf[v] += g[off + v] * y[off + v];
                            }
                        }
                        for c in 0..vd.channels {
                            let off = base + voxels * c;
                            for v in 0..voxels {
                                gx[off + v] = y[off + v] * (g[off + v] - dotbuf[v]);
                            }
                        }
                    }
                    accumulate(self.grad_buf(x), &gx);
                }
            }
            Op::SoftmaxLoss { logits, labels, probs } => {
                let logits = *logits;
                if self.needs_grad[logits] {
                    let vd = self.values[logits].as_volume()?;
                    let voxels = vd.voxels();
                    let total = (voxels * vd.batch) as f32;
                    let scale = g[0] / total;
                    let mut gx = Vec::with_capacity(probs.len());
                    gx.extend_from_slice(probs);
                    for n in 0..vd.batch {
                        let base = n * vd.sample_len();
                        for v in 0..voxels {
                            let c = labels[n * voxels + v] as usize;
                            gx[base + c * voxels + v] -= 1.0;
                        }
                    }
                    for v in gx.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(self.grad_buf(logits), &gx);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.needs_grad[a] {
                    // gA[:,l] += sum_j gC[:,j] * B[l,j]
                    let bd = self.values[b].data().to_vec();
                    let ga = self.grad_buf(a);
                    for l in 0..k {
                        for j in 0..n {
                            let s = bd[l + k * j];
                            let gcol = &g[m * j..m * (j + 1)];
                            for (o, &gi) in ga[m * l..m * (l + 1)].iter_mut().zip(gcol) {
                                *o += s * gi;
                            }
                        }
                    }
                }
                if self.needs_grad[b] {
                    let ad = self.values[a].data().to_vec();
                    let gb = self.grad_buf(b);
                    for j in 0..n {
                        let gcol = &g[m * j..m * (j + 1)];
                        for l in 0..k {
                            gb[l + k * j] += dot_f64(&ad[m * l..m * (l + 1)], gcol);
                        }
                    }
                }
            }
            Op::L1Normalize { x } => {
                let x = *x;
                if self.needs_grad[x] {
                    let xv = self.values[x].data().to_vec();
                    let y = self.values[node].data().to_vec();
                    let rows = self.values[x].shape()[0];
                    let cols = xv.len() / rows;
                    let mut gx = vec![0f32; xv.len()];
                    for j in 0..cols {
                        let xs = &xv[rows * j..rows * (j + 1)];
                        let ys = &y[rows * j..rows * (j + 1)];
                        let gs = &g[rows * j..rows * (j + 1)];
                        let s = kernels::sum_fixed(xs);
                        let t = dot_f64(gs, ys);
                        for i in 0..rows {
                            gx[rows * j + i] = (gs[i] - t) / s;
                        }
                    }
                    accumulate(self.grad_buf(x), &gx);
                }
            }
            Op::ScaleChannels { f, m } => {
                let (f, m) = (*f, *m);
                let vd = self.values[f].as_volume()?;
                let voxels = vd.voxels();
                let per_sample = self.values[m].order() == 2;
                if self.needs_grad[f] {
                    let md = self.values[m].data().to_vec();
                    let mut gf = vec![0f32; self.values[f].len()];
                    for n in 0..vd.batch {
                        for c in 0..vd.channels {
                            let w = if per_sample { md[c + vd.channels * n] } else { md[c] };
                            let base = voxels * (c + vd.channels * n);
                            for v in 0..voxels {
                                gf[base + v] = w * g[base + v];
                            }
                        }
                    }
                    accumulate(self.grad_buf(f), &gf);
                }
                if self.needs_grad[m] {
                    let fd = self.values[f].data().to_vec();
                    let mlen = self.values[m].len();
                    let mut gm = vec![0f32; mlen];
                    for n in 0..vd.batch {
                        for c in 0..vd.channels {
                            let base = voxels * (c + vd.channels * n);
                            let d = dot_f64(&fd[base..base + voxels], &g[base..base + voxels]);
                            if per_sample {
                                gm[c + vd.channels * n] += d;
                            } else {
                                gm[c] += d;
                            }
                        }
                    }
                    accumulate(self.grad_buf(m), &gm);
                }
            }
            Op::ChannelWeightedSum { f, p } => {
                let (f, p) = (*f, *p);
                let vd = self.values[f].as_volume()?;
                let voxels = vd.voxels();
                if self.needs_grad[f] {
                    let pd = self.values[p].data().to_vec();
                    let mut gf = vec![0f32; self.values[f].len()];
                    for n in 0..vd.batch {
                        let pplane = &pd[voxels * n..voxels * (n + 1)];
                        for c in 0..vd.channels {
                            let gi = g[c + vd.channels * n];
                            let base = voxels * (c + vd.channels * n);
                            for v in 0..voxels {
                                gf[base + v] = gi * pplane[v];
                            }
                        }
                    }
                    accumulate(self.grad_buf(f), &gf);
                }
                if self.needs_grad[p] {
                    let fd = self.values[f].data().to_vec();
                    let mut gp = vec![0f32; self.values[p].len()];
                    for n in 0..vd.batch {
                        let gplane = &mut gp[voxels * n..voxels * (n + 1)];
                        for c in 0..vd.channels {
                            let gi = g[c + vd.channels * n];
                            let base = voxels * (c + vd.channels * n);
                            for v in 0..voxels {
                                gplane[v] += gi * fd[base + v];
                            }
                        }
                    }
                    accumulate(self.grad_buf(p), &gp);
                }
            }
            Op::SumChannels { x, classes } => {
                let x = *x;
                let classes = classes.clone();
                if self.needs_grad[x] {
                    let vd = self.values[x].as_volume()?;
                    let voxels = vd.voxels();
                    let mut gx = vec![0f32; self.values[x].len()];
                    for n in 0..vd.batch {
                        let gplane = &g[voxels * n..voxels * (n + 1)];
                        for &c in &classes {
                            let base = voxels * (c + vd.channels * n);
                            for v in 0..voxels {
                                gx[base + v] += gplane[v];
                            }
                        }
                    }
                    accumulate(self.grad_buf(x), &gx);
                }
            }
            Op::ProbWeightedMerge { st, sn, pt, pn } => {
                let (st, sn, pt, pn) = (*st, *sn, *pt, *pn);
                let vd = self.values[st].as_volume()?;
                let voxels = vd.voxels();
                for (score, prob) in [(st, pt), (sn, pn)] {
                    if self.needs_grad[score] {
                        let pd = self.values[prob].data().to_vec();
                        let mut gs = vec![0f32; self.values[score].len()];
                        for n in 0..vd.batch {
                            let pplane = &pd[voxels * n..voxels * (n + 1)];
                            for c in 0..vd.channels {
                                let base = voxels * (c + vd.channels * n);
                                for v in 0..voxels {
                                    gs[base + v] = pplane[v] * g[base + v];
                                }
                            }
                        }
                        accumulate(self.grad_buf(score), &gs);
                    }
                    if self.needs_grad[prob] {
                        let sd = self.values[score].data().to_vec();
                        let mut gp = vec![0f32; self.values[prob].len()];
                        for n in 0..vd.batch {
                            let gplane = &mut gp[voxels * n..voxels * (n + 1)];
                            for c in 0..vd.channels {
                                let base = voxels * (c + vd.channels * n);
                                for v in 0..voxels {
                                    gplane[v] += sd[base + v] * g[base + v];
                                }
                            }
                        }
                        accumulate(self.grad_buf(prob), &gp);
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if self.needs_grad[x] {
                    let vd = self.values[x].as_volume()?;
                    let voxels = vd.voxels();
                    let mut gx = vec![0f32; self.values[x].len()];
                    for n in 0..vd.batch {
                        for c in 0..vd.channels {
                            let gi = g[c + vd.channels * n] / voxels as f32;
                            let base = voxels * (c + vd.channels * n);
                            for v in 0..voxels {
                                gx[base + v] = gi;
                            }
                        }
                    }
                    accumulate(self.grad_buf(x), &gx);
                }
            }
            Op::BiasAdd { x, b } => {
                let (x, b) = (*x, *b);
                if self.needs_grad[x] {
                    accumulate(self.grad_buf(x), g);
                }
                if self.needs_grad[b] {
                    let rows = self.values[b].len();
                    let cols = g.len() / rows;
                    let gb = self.grad_buf(b);
                    for j in 0..cols {
                        for i in 0..rows {
                            gb[i] += g[i + rows * j];
                        }
                    }
                }
            }
            Op::ConcatBatch { parts } => {
                let parts = parts.clone();
                let mut off = 0usize;
                for p in parts {
                    let len = self.values[p].len();
                    if self.needs_grad[p] {
                        let gslice = g[off..off + len].to_vec();
                        accumulate(self.grad_buf(p), &gslice);
                    }
                    off += len;
                }
            }
            Op::SliceBatch { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.needs_grad[x] {
                    let vd = self.values[x].as_volume()?;
                    let sl = vd.sample_len();
                    let gx = self.grad_buf(x);
                    for (o, &gi) in gx[sl * start..sl * (start + len)].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::GatherBatch { x, indices } => {
                let x = *x;
                let indices = indices.clone();
                if self.needs_grad[x] {
                    let vd = self.values[x].as_volume()?;
                    let sl = vd.sample_len();
                    let gx = self.grad_buf(x);
                    for (i, &src) in indices.iter().enumerate() {
                        for (o, &gi) in
                            gx[sl * src..sl * (src + 1)].iter_mut().zip(&g[sl * i..sl * (i + 1)])
                        {
                            *o += gi;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                if self.needs_grad[x] {
                    let gi = g[0];
                    let gx: Vec<f32> = weights.iter().map(|&w| w * gi).collect();
                    accumulate(self.grad_buf(x), &gx);
                }
            }
        }
        Ok(())
    }
}

fn volume_shape(spatial: [usize; 3], channels: usize, batched: bool, batch: usize) -> Vec<usize> {
    let mut s = vec![spatial[0], spatial[1], spatial[2], channels];
    if batched {
        s.push(batch);
    }
    s
}

fn accumulate(buf: &mut [f32], add: &[f32]) {
    debug_assert_eq!(buf.len(), add.len());
    for (o, &v) in buf.iter_mut().zip(add) {
        *o += v;
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += (*x as f64) * (*y as f64);
    }
    acc as f32
}

/// Per-voxel channel softmax of one contiguous sample.
fn softmax_sample(x: &[f32], out: &mut [f32], voxels: usize, channels: usize) {
    let mut maxbuf = vec![f32::NEG_INFINITY; voxels];
    for c in 0..channels {
        let plane = &x[voxels * c..voxels * (c + 1)];
        for (m, &v) in maxbuf.iter_mut().zip(plane) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sumbuf = vec![0f32; voxels];
    for c in 0..channels {
        let xplane = &x[voxels * c..voxels * (c + 1)];
        let oplane = &mut out[voxels * c..voxels * (c + 1)];
        for v in 0..voxels {
            let e = (xplane[v] - maxbuf[v]).exp();
            oplane[v] = e;
            sumbuf[v] += e;
        }
    }
    for c in 0..channels {
        let oplane = &mut out[voxels * c..voxels * (c + 1)];
        for v in 0..voxels {
            oplane[v] /= sumbuf[v];
        }
    }
}

/// Run `body` over fixed sample chunks in parallel and combine the per-chunk
/// weight/bias gradients in chunk order.
fn batched_weight_grads<F>(batch: usize, wlen: usize, blen: usize, body: F) -> (Vec<f32>, Vec<f32>)
where
    F: Fn(std::ops::Range<usize>, &mut [f32], &mut [f32]) + Sync,
{
    let nchunks = GRAD_CHUNKS.min(batch.max(1));
    let per = batch.div_ceil(nchunks);
    let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * per;
            let hi = ((c + 1) * per).min(batch);
            let mut gw = vec![0f32; wlen];
            let mut gb = vec![0f32; blen];
            if lo < hi {
                body(lo..hi, &mut gw, &mut gb);
            }
            (gw, gb)
        })
        .collect();
    let mut gw = vec![0f32; wlen];
    let mut gb = vec![0f32; blen];
    for (pw, pb) in partials {
        accumulate(&mut gw, &pw);
        accumulate(&mut gb, &pb);
    }
    (gw, gb)
}
