//! Raw single-sample convolution kernels on planar `[W,H,L,C]` buffers.
//!
//! Weights are `[k0,k1,k2,Cin,Cout]` in the same axis-0-fastest layout, so
//! for a fixed (co, ci, tap-row) the k0 weights are contiguous. The hot loops
//! are row operations over the fastest axis, written so LLVM vectorizes them;
//! reductions use fixed-width lane accumulators to keep summation order
//! independent of data and thread count.

use crate::error::{OmError, Result};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

pub fn conv3d_geometry(
    in_dims: [usize; 3],
    kernel: [usize; 3],
    cin: usize,
    cout: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<ConvGeom> {
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        if stride[a] < 1 {
            return Err(OmError::InvalidArgument {
                op: "conv3d",
                msg: format!("stride must be >= 1, got {:?}", stride),
            });
        }
        let padded = in_dims[a] + 2 * pad[a];
        if kernel[a] == 0 || kernel[a] > padded {
            return Err(OmError::InvalidArgument {
                op: "conv3d",
                msg: format!(
                    "kernel {:?} does not fit padded input {:?} (pad {:?})",
                    kernel, in_dims, pad
                ),
            });
        }
        out_dims[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(ConvGeom {
        in_dims,
        out_dims,
        kernel,
        cin,
        cout,
        stride,
        pad,
    })
}

pub fn deconv3d_geometry(
    in_dims: [usize; 3],
    kernel: [usize; 3],
    cin: usize,
    cout: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<ConvGeom> {
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        if stride[a] < 1 {
            return Err(OmError::InvalidArgument {
                op: "deconv3d",
                msg: format!("stride must be >= 1, got {:?}", stride),
            });
        }
        let ext = stride[a] * (in_dims[a] - 1) + kernel[a];
        if ext < 2 * pad[a] + 1 {
            return Err(OmError::InvalidArgument {
                op: "deconv3d",
                msg: format!(
                    "padding {:?} too large for input {:?}, kernel {:?}, stride {:?}",
                    pad, in_dims, kernel, stride
                ),
            });
        }
        out_dims[a] = ext - 2 * pad[a];
    }
    Ok(ConvGeom {
        in_dims,
        out_dims,
        kernel,
        cin,
        cout,
        stride,
        pad,
    })
}

#[inline]
fn row(buf: &[f32], dims: [usize; 3], y: usize, z: usize, c: usize) -> &[f32] {
    let start = dims[0] * (y + dims[1] * (z + dims[2] * c));
    &buf[start..start + dims[0]]
}

#[inline]
fn row_mut(buf: &mut [f32], dims: [usize; 3], y: usize, z: usize, c: usize) -> &mut [f32] {
    let start = dims[0] * (y + dims[1] * (z + dims[2] * c));
    &mut buf[start..start + dims[0]]
}

#[inline]
fn weight_row<'a>(w: &'a [f32], g: &ConvGeom, ky: usize, kz: usize, ci: usize, co: usize) -> &'a [f32] {
    let k = g.kernel;
    let start = k[0] * (ky + k[1] * (kz + k[2] * (ci + g.cin * co)));
    &w[start..start + k[0]]
}

/// Dot product with 8 independent lanes so the loop vectorizes and the
/// summation order stays fixed.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s01 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let s23 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    s01 + s23 + tail
}

/// Lane-accumulated sum, fixed order.
pub fn sum_fixed(a: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    for xa in &mut ca {
        for l in 0..8 {
            lanes[l] += xa[l];
        }
    }
    let mut tail = 0f32;
    for v in ca.remainder() {
        tail += v;
    }
    let s01 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let s23 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    s01 + s23 + tail
}

/// `out[i] += s * a[i]`
#[inline]
fn axpy(out: &mut [f32], a: &[f32], s: f32) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &v) in out.iter_mut().zip(a) {
        *o += s * v;
    }
}

/// Valid output-x interval for a given kernel offset at stride 1:
/// indices ox with 0 <= ox + kx - pad < in_w.
#[inline]
fn unit_stride_span(out_w: usize, in_w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (in_w + pad - kx).min(out_w);
    (lo, hi.max(lo))
}

#[inline]
fn is_k3s1p1(g: &ConvGeom) -> bool {
    g.kernel == [3, 3, 3] && g.stride == [1, 1, 1] && g.pad == [1, 1, 1]
}

#[inline]
fn is_k1s1p0(g: &ConvGeom) -> bool {
    g.kernel == [1, 1, 1] && g.stride == [1, 1, 1] && g.pad == [0, 0, 0]
}

/// Strided downsampling conv with even input extent along x, so rows split
/// cleanly into even/odd phases.
#[inline]
fn is_k3s2p1(g: &ConvGeom) -> bool {
    g.kernel == [3, 3, 3] && g.stride == [2, 2, 2] && g.pad == [1, 1, 1] && g.in_dims[0] % 2 == 0
}

#[inline]
fn is_k2s2p0(g: &ConvGeom) -> bool {
    g.kernel == [2, 2, 2] && g.stride == [2, 2, 2] && g.pad == [0, 0, 0]
}

/// Split a row into even-index and odd-index elements.
#[inline]
fn deinterleave(row: &[f32], even: &mut [f32], odd: &mut [f32]) {
    let half = row.len() / 2;
    for i in 0..half {
        even[i] = row[2 * i];
        odd[i] = row[2 * i + 1];
    }
    if row.len() % 2 == 1 {
        even[half] = row[row.len() - 1];
    }
}

/// 3x3x3, stride 1, pad 1: the workhorse shape. Unrolled kernel-x taps.
fn conv3d_forward_k3(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let [wd, hd, ld] = g.in_dims;
    let plane = wd * hd;
    for co in 0..g.cout {
        for oz in 0..ld {
            for oy in 0..hd {
                let os = wd * (oy + hd * (oz + ld * co));
                let orow = &mut out[os..os + wd];
                orow.fill(bias[co]);
                for kz in 0..3usize {
                    let iz = (oz + kz).wrapping_sub(1);
                    if iz >= ld {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (oy + ky).wrapping_sub(1);
                        if iy >= hd {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let is = iz * plane + iy * wd + ci * plane * ld;
                            let irow = &x[is..is + wd];
                            let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                            let (w0, w1, w2) = (w[ws], w[ws + 1], w[ws + 2]);
                            stencil3(orow, irow, w0, w1, w2);
                        }
                    }
                }
            }
        }
    }
}

/// Fused 3-tap stencil along x with zero padding of one:
/// `out[i] += w0*in[i-1] + w1*in[i] + w2*in[i+1]`.
/// Dispatches to fully unrolled bodies for the row lengths the network
/// actually uses.
#[inline]
fn stencil3(out: &mut [f32], inp: &[f32], w0: f32, w1: f32, w2: f32) {
    match out.len() {
        32 => stencil3_fixed::<32>(out, inp, w0, w1, w2),
        16 => stencil3_fixed::<16>(out, inp, w0, w1, w2),
        8 => stencil3_fixed::<8>(out, inp, w0, w1, w2),
        _ => stencil3_generic(out, inp, w0, w1, w2),
    }
}

#[inline]
fn stencil3_fixed<const N: usize>(out: &mut [f32], inp: &[f32], w0: f32, w1: f32, w2: f32) {
    let out: &mut [f32; N] = out.try_into().unwrap();
    let inp: &[f32; N] = inp.try_into().unwrap();
    out[0] += w1 * inp[0] + w2 * inp[1];
    out[N - 1] += w0 * inp[N - 2] + w1 * inp[N - 1];
    for i in 1..N - 1 {
        out[i] += w0 * inp[i - 1] + w1 * inp[i] + w2 * inp[i + 1];
    }
}

#[inline]
fn stencil3_generic(out: &mut [f32], inp: &[f32], w0: f32, w1: f32, w2: f32) {
    let wd = out.len();
    debug_assert_eq!(wd, inp.len());
    if wd == 1 {
        out[0] += w1 * inp[0];
        return;
    }
    out[0] += w1 * inp[0] + w2 * inp[1];
    out[wd - 1] += w0 * inp[wd - 2] + w1 * inp[wd - 1];
    let interior = &mut out[1..wd - 1];
    let (a, b, c) = (&inp[..wd - 2], &inp[1..wd - 1], &inp[2..]);
    for i in 0..interior.len() {
        interior[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
    }
}

/// 3x3x3 stride-2 pad-1 downsampling conv. Input rows are deinterleaved so
/// the three taps become contiguous shifted passes:
/// `out[ox] += w0*odd[ox-1] + w1*even[ox] + w2*odd[ox]`.
fn conv3d_forward_k3s2(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let id = g.in_dims;
    let od = g.out_dims;
    let plane = id[0] * id[1];
    let half = id[0] / 2;
    let mut even = vec![0f32; half];
    let mut odd = vec![0f32; half];
    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                let orow = &mut out[os..os + od[0]];
                orow.fill(bias[co]);
                for kz in 0..3usize {
                    let iz = (2 * oz + kz).wrapping_sub(1);
                    if iz >= id[2] {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky).wrapping_sub(1);
                        if iy >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let is = iz * plane + iy * id[0] + ci * plane * id[2];
                            deinterleave(&x[is..is + id[0]], &mut even, &mut odd);
                            let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                            let (w0, w1, w2) = (w[ws], w[ws + 1], w[ws + 2]);
                            let n = orow.len();
                            // ox = 0 has no left neighbor (ix = -1)
                            orow[0] += w1 * even[0] + w2 * odd[0];
                            for ox in 1..n {
                                orow[ox] += w0 * odd[ox - 1] + w1 * even[ox] + w2 * odd[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_input_k3s2(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    let id = g.in_dims;
    let od = g.out_dims;
    let plane = id[0] * id[1];
    let half = id[0] / 2;
    let mut even = vec![0f32; half];
    let mut odd = vec![0f32; half];
    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                let grow = &gout[os..os + od[0]];
                for kz in 0..3usize {
                    let iz = (2 * oz + kz).wrapping_sub(1);
                    if iz >= id[2] {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky).wrapping_sub(1);
                        if iy >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                            let (w0, w1, w2) = (w[ws], w[ws + 1], w[ws + 2]);
                            even.fill(0.0);
                            odd.fill(0.0);
                            let n = grow.len();
                            even[0] += w1 * grow[0];
                            odd[0] += w2 * grow[0];
                            for ox in 1..n {
                                odd[ox - 1] += w0 * grow[ox];
                                even[ox] += w1 * grow[ox];
                                odd[ox] += w2 * grow[ox];
                            }
                            let is = iz * plane + iy * id[0] + ci * plane * id[2];
                            let irow = &mut gin[is..is + id[0]];
                            for i in 0..half {
                                irow[2 * i] += even[i];
                                irow[2 * i + 1] += odd[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_weights_k3s2(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    let id = g.in_dims;
    let od = g.out_dims;
    let plane = id[0] * id[1];
    let half = id[0] / 2;
    let mut even = vec![0f32; half];
    let mut odd = vec![0f32; half];
    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                let grow = &gout[os..os + od[0]];
                gbias[co] += sum_fixed(grow);
                for kz in 0..3usize {
                    let iz = (2 * oz + kz).wrapping_sub(1);
                    if iz >= id[2] {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky).wrapping_sub(1);
                        if iy >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let is = iz * plane + iy * id[0] + ci * plane * id[2];
                            deinterleave(&x[is..is + id[0]], &mut even, &mut odd);
                            let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                            let n = grow.len();
                            gw[ws] += dot(&grow[1..], &odd[..n - 1]);
                            gw[ws + 1] += dot(grow, &even[..n]);
                            gw[ws + 2] += dot(grow, &odd[..n]);
                        }
                    }
                }
            }
        }
    }
}

/// 2x2x2 stride-2 transposed conv: each input voxel owns a disjoint 2x2x2
/// output block, so the output row pair splits into even/odd phases computed
/// as contiguous passes and interleaved once.
fn deconv3d_forward_k2s2(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let id = g.in_dims;
    let od = g.out_dims;
    let in_plane = id[0] * id[1];
    let mut even = vec![0f32; id[0]];
    let mut odd = vec![0f32; id[0]];
    for co in 0..g.cout {
        for iz in 0..id[2] {
            for iy in 0..id[1] {
                for kz in 0..2usize {
                    let oz = 2 * iz + kz;
                    for ky in 0..2usize {
                        let oy = 2 * iy + ky;
                        even.fill(0.0);
                        odd.fill(0.0);
                        for ci in 0..g.cin {
                            let is = iz * in_plane + iy * id[0] + ci * in_plane * id[2];
                            let irow = &x[is..is + id[0]];
                            let ws = 2 * (ky + 2 * (kz + 2 * (ci + g.cin * co)));
                            axpy(&mut even, irow, w[ws]);
                            axpy(&mut odd, irow, w[ws + 1]);
                        }
                        let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                        let orow = &mut out[os..os + od[0]];
                        for i in 0..id[0] {
                            orow[2 * i] = bias[co] + even[i];
                            orow[2 * i + 1] = bias[co] + odd[i];
                        }
                    }
                }
            }
        }
    }
}

fn deconv3d_backward_input_k2s2(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    let id = g.in_dims;
    let od = g.out_dims;
    let in_plane = id[0] * id[1];
    let mut even = vec![0f32; id[0]];
    let mut odd = vec![0f32; id[0]];
    for co in 0..g.cout {
        for iz in 0..id[2] {
            for iy in 0..id[1] {
                for kz in 0..2usize {
                    let oz = 2 * iz + kz;
                    for ky in 0..2usize {
                        let oy = 2 * iy + ky;
                        let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                        let grow = &gout[os..os + od[0]];
                        deinterleave(grow, &mut even, &mut odd);
                        for ci in 0..g.cin {
                            let ws = 2 * (ky + 2 * (kz + 2 * (ci + g.cin * co)));
                            let is = iz * in_plane + iy * id[0] + ci * in_plane * id[2];
                            let irow = &mut gin[is..is + id[0]];
                            let (w0, w1) = (w[ws], w[ws + 1]);
                            for i in 0..id[0] {
                                irow[i] += w0 * even[i] + w1 * odd[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn deconv3d_backward_weights_k2s2(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    let id = g.in_dims;
    let od = g.out_dims;
    let in_plane = id[0] * id[1];
    let out_plane_len = od[0] * od[1] * od[2];
    let mut even = vec![0f32; id[0]];
    let mut odd = vec![0f32; id[0]];
    for co in 0..g.cout {
        gbias[co] += sum_fixed(&gout[out_plane_len * co..out_plane_len * (co + 1)]);
        for iz in 0..id[2] {
            for iy in 0..id[1] {
                for kz in 0..2usize {
                    let oz = 2 * iz + kz;
                    for ky in 0..2usize {
                        let oy = 2 * iy + ky;
                        let os = od[0] * (oy + od[1] * (oz + od[2] * co));
                        deinterleave(&gout[os..os + od[0]], &mut even, &mut odd);
                        for ci in 0..g.cin {
                            let is = iz * in_plane + iy * id[0] + ci * in_plane * id[2];
                            let irow = &x[is..is + id[0]];
                            let ws = 2 * (ky + 2 * (kz + 2 * (ci + g.cin * co)));
                            gw[ws] += dot(irow, &even);
                            gw[ws + 1] += dot(irow, &odd);
                        }
                    }
                }
            }
        }
    }
}

/// 1x1x1 pointwise convolution: plane-wide multiply-accumulate.
fn conv3d_forward_k1(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let voxels = g.in_dims[0] * g.in_dims[1] * g.in_dims[2];
    for co in 0..g.cout {
        let oplane = &mut out[voxels * co..voxels * (co + 1)];
        oplane.fill(bias[co]);
        for ci in 0..g.cin {
            let wv = w[ci + g.cin * co];
            axpy(oplane, &x[voxels * ci..voxels * (ci + 1)], wv);
        }
    }
}

/// Cross-correlation forward for one sample. `out` must be sized for the
/// geometry; it is overwritten.
pub fn conv3d_forward(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    if is_k3s1p1(g) {
        return conv3d_forward_k3(x, w, bias, g, out);
    }
    if is_k1s1p0(g) {
        return conv3d_forward_k1(x, w, bias, g, out);
    }
    if is_k3s2p1(g) {
        return conv3d_forward_k3s2(x, w, bias, g, out);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let orow = row_mut(out, [od[0], od[1], od[2] * g.cout], oy, oz + od[2] * co, 0);
                orow.fill(bias[co]);
                for kz in 0..k[2] {
                    let iz = (oz * sz + kz) as isize - pz as isize;
                    if iz < 0 || iz as usize >= id[2] {
                        continue;
                    }
                    for ky in 0..k[1] {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy as usize >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let irow = row(x, id, iy as usize, iz as usize, ci);
                            let wrow = weight_row(w, g, ky, kz, ci, co);
                            if sx == 1 {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    let (lo, hi) = unit_stride_span(od[0], id[0], kx, px);
                                    if lo < hi {
                                        let ishift = lo + kx - px;
                                        axpy(
                                            &mut orow[lo..hi],
                                            &irow[ishift..ishift + hi - lo],
                                            wv,
                                        );
                                    }
                                }
                            } else {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    for ox in 0..od[0] {
                                        let ix = (ox * sx + kx) as isize - px as isize;
                                        if ix >= 0 && (ix as usize) < id[0] {
                                            orow[ox] += wv * irow[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_input_k3(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    let [wd, hd, ld] = g.in_dims;
    let plane = wd * hd;
    for co in 0..g.cout {
        for oz in 0..ld {
            for oy in 0..hd {
                let os = wd * (oy + hd * (oz + ld * co));
                let grow = &gout[os..os + wd];
                for kz in 0..3usize {
                    let iz = (oz + kz).wrapping_sub(1);
                    if iz >= ld {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (oy + ky).wrapping_sub(1);
                        if iy >= hd {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let is = iz * plane + iy * wd + ci * plane * ld;
                            let irow = &mut gin[is..is + wd];
                            let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                            let (w0, w1, w2) = (w[ws], w[ws + 1], w[ws + 2]);
                            // ix = ox + kx - 1: the adjoint stencil runs with
                            // the taps mirrored
                            stencil3(irow, grow, w2, w1, w0);
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_input_k1(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    let voxels = g.in_dims[0] * g.in_dims[1] * g.in_dims[2];
    for co in 0..g.cout {
        let gplane = &gout[voxels * co..voxels * (co + 1)];
        for ci in 0..g.cin {
            let wv = w[ci + g.cin * co];
            axpy(&mut gin[voxels * ci..voxels * (ci + 1)], gplane, wv);
        }
    }
}

/// Gradient of conv3d w.r.t. its input; accumulates into pre-zeroed `gin`.
pub fn conv3d_backward_input(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    if is_k3s1p1(g) {
        return conv3d_backward_input_k3(gout, w, g, gin);
    }
    if is_k1s1p0(g) {
        return conv3d_backward_input_k1(gout, w, g, gin);
    }
    if is_k3s2p1(g) {
        return conv3d_backward_input_k3s2(gout, w, g, gin);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let grow = row(gout, [od[0], od[1], od[2] * g.cout], oy, oz + od[2] * co, 0);
                for kz in 0..k[2] {
                    let iz = (oz * sz + kz) as isize - pz as isize;
                    if iz < 0 || iz as usize >= id[2] {
                        continue;
                    }
                    for ky in 0..k[1] {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy as usize >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let irow = row_mut(gin, id, iy as usize, iz as usize, ci);
                            let wrow = weight_row(w, g, ky, kz, ci, co);
                            if sx == 1 {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    let (lo, hi) = unit_stride_span(od[0], id[0], kx, px);
                                    if lo < hi {
                                        let ishift = lo + kx - px;
                                        axpy(
                                            &mut irow[ishift..ishift + hi - lo],
                                            &grow[lo..hi],
                                            wv,
                                        );
                                    }
                                }
                            } else {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    for ox in 0..od[0] {
                                        let ix = (ox * sx + kx) as isize - px as isize;
                                        if ix >= 0 && (ix as usize) < id[0] {
                                            irow[ix as usize] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lane accumulator for the three shifted row products of the 3-tap
/// stencil; horizontal reduction happens once per weight triple.
#[derive(Clone, Copy)]
struct Dot3Lanes {
    l0: [f32; 8],
    l1: [f32; 8],
    l2: [f32; 8],
    t0: f32,
    t1: f32,
    t2: f32,
}

impl Dot3Lanes {
    #[inline]
    fn new() -> Self {
        Dot3Lanes { l0: [0.0; 8], l1: [0.0; 8], l2: [0.0; 8], t0: 0.0, t1: 0.0, t2: 0.0 }
    }

    /// Accumulate `(sum g[i+1]*x[i], sum g[i]*x[i], sum g[i]*x[i+1])`.
    #[inline]
    fn accumulate(&mut self, g: &[f32], x: &[f32]) {
        let n = g.len();
        if n == 1 {
            self.t1 += g[0] * x[0];
            return;
        }
        let n8 = (n - 1) / 8 * 8;
        for i in (0..n8).step_by(8) {
            for l in 0..8 {
                self.l0[l] += g[i + l + 1] * x[i + l];
                self.l1[l] += g[i + l] * x[i + l];
                self.l2[l] += g[i + l] * x[i + l + 1];
            }
        }
        for i in n8..n - 1 {
            self.t0 += g[i + 1] * x[i];
            self.t1 += g[i] * x[i];
            self.t2 += g[i] * x[i + 1];
        }
        self.t1 += g[n - 1] * x[n - 1];
    }

    #[inline]
    fn finish(self) -> (f32, f32, f32) {
        let h = |l: [f32; 8], t: f32| ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7])) + t;
        (h(self.l0, self.t0), h(self.l1, self.t1), h(self.l2, self.t2))
    }
}

fn conv3d_backward_weights_k3(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    let [wd, hd, ld] = g.in_dims;
    let plane = wd * hd;
    for co in 0..g.cout {
        for oz in 0..ld {
            for oy in 0..hd {
                let os = wd * (oy + hd * (oz + ld * co));
                gbias[co] += sum_fixed(&gout[os..os + wd]);
            }
        }
        for ci in 0..g.cin {
            for kz in 0..3usize {
                for ky in 0..3usize {
                    let mut lanes = Dot3Lanes::new();
                    for oz in 0..ld {
                        let iz = (oz + kz).wrapping_sub(1);
                        if iz >= ld {
                            continue;
                        }
                        for oy in 0..hd {
                            let iy = (oy + ky).wrapping_sub(1);
                            if iy >= hd {
                                continue;
                            }
                            let os = wd * (oy + hd * (oz + ld * co));
                            let is = iz * plane + iy * wd + ci * plane * ld;
                            lanes.accumulate(&gout[os..os + wd], &x[is..is + wd]);
                        }
                    }
                    let (s0, s1, s2) = lanes.finish();
                    let ws = 3 * (ky + 3 * (kz + 3 * (ci + g.cin * co)));
                    gw[ws] += s0;
                    gw[ws + 1] += s1;
                    gw[ws + 2] += s2;
                }
            }
        }
    }
}

fn conv3d_backward_weights_k1(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    let voxels = g.in_dims[0] * g.in_dims[1] * g.in_dims[2];
    for co in 0..g.cout {
        let gplane = &gout[voxels * co..voxels * (co + 1)];
        gbias[co] += sum_fixed(gplane);
        for ci in 0..g.cin {
            gw[ci + g.cin * co] += dot(gplane, &x[voxels * ci..voxels * (ci + 1)]);
        }
    }
}

/// Gradient of conv3d w.r.t. weights and bias; accumulates into `gw`/`gbias`
/// buffers which the caller zeroes.
pub fn conv3d_backward_weights(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    if is_k3s1p1(g) {
        return conv3d_backward_weights_k3(x, gout, g, gw, gbias);
    }
    if is_k1s1p0(g) {
        return conv3d_backward_weights_k1(x, gout, g, gw, gbias);
    }
    if is_k3s2p1(g) {
        return conv3d_backward_weights_k3s2(x, gout, g, gw, gbias);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                let grow = row(gout, [od[0], od[1], od[2] * g.cout], oy, oz + od[2] * co, 0);
                gbias[co] += sum_fixed(grow);
                for kz in 0..k[2] {
                    let iz = (oz * sz + kz) as isize - pz as isize;
                    if iz < 0 || iz as usize >= id[2] {
                        continue;
                    }
                    for ky in 0..k[1] {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy as usize >= id[1] {
                            continue;
                        }
                        for ci in 0..g.cin {
                            let irow = row(x, id, iy as usize, iz as usize, ci);
                            let wbase = k[0] * (ky + k[1] * (kz + k[2] * (ci + g.cin * co)));
                            if sx == 1 {
                                for kx in 0..k[0] {
                                    let (lo, hi) = unit_stride_span(od[0], id[0], kx, px);
                                    if lo < hi {
                                        let ishift = lo + kx - px;
                                        gw[wbase + kx] +=
                                            dot(&grow[lo..hi], &irow[ishift..ishift + hi - lo]);
                                    }
                                }
                            } else {
                                for kx in 0..k[0] {
                                    let mut acc = 0f32;
                                    for ox in 0..od[0] {
                                        let ix = (ox * sx + kx) as isize - px as isize;
                                        if ix >= 0 && (ix as usize) < id[0] {
                                            acc += grow[ox] * irow[ix as usize];
                                        }
                                    }
                                    gw[wbase + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution forward for one sample; `out` is overwritten.
pub fn deconv3d_forward(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, out: &mut [f32]) {
    if is_k2s2p0(g) {
        return deconv3d_forward_k2s2(x, w, bias, g, out);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        let plane = row_mut(out, [od[0] * od[1] * od[2], 1, 1], 0, 0, co);
        plane.fill(bias[co]);
    }
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for kz in 0..k[2] {
                for ky in 0..k[1] {
                    let wrow = weight_row(w, g, ky, kz, ci, co);
                    for iz in 0..id[2] {
                        let oz = (iz * sz + kz) as isize - pz as isize;
                        if oz < 0 || oz as usize >= od[2] {
                            continue;
                        }
                        for iy in 0..id[1] {
                            let oy = (iy * sy + ky) as isize - py as isize;
                            if oy < 0 || oy as usize >= od[1] {
                                continue;
                            }
                            let irow = row(x, id, iy, iz, ci);
                            let orow =
                                row_mut(out, [od[0], od[1], od[2] * g.cout], oy as usize, oz as usize + od[2] * co, 0);
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if sx == 1 {
                                    // ox = ix + kx - px
                                    let lo = px.saturating_sub(kx);
                                    let hi = (od[0] + px - kx).min(id[0]).max(lo);
                                    if lo < hi {
                                        let oshift = lo + kx - px;
                                        axpy(
                                            &mut orow[oshift..oshift + hi - lo],
                                            &irow[lo..hi],
                                            wv,
                                        );
                                    }
                                } else {
                                    for ix in 0..id[0] {
                                        let ox = (ix * sx + kx) as isize - px as isize;
                                        if ox >= 0 && (ox as usize) < od[0] {
                                            orow[ox as usize] += wv * irow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of deconv3d w.r.t. its input; accumulates into pre-zeroed `gin`.
pub fn deconv3d_backward_input(gout: &[f32], w: &[f32], g: &ConvGeom, gin: &mut [f32]) {
    if is_k2s2p0(g) {
        return deconv3d_backward_input_k2s2(gout, w, g, gin);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        for ci in 0..g.cin {
            for kz in 0..k[2] {
                for ky in 0..k[1] {
                    let wrow = weight_row(w, g, ky, kz, ci, co);
                    for iz in 0..id[2] {
                        let oz = (iz * sz + kz) as isize - pz as isize;
                        if oz < 0 || oz as usize >= od[2] {
                            continue;
                        }
                        for iy in 0..id[1] {
                            let oy = (iy * sy + ky) as isize - py as isize;
                            if oy < 0 || oy as usize >= od[1] {
                                continue;
                            }
                            let grow =
                                row(gout, [od[0], od[1], od[2] * g.cout], oy as usize, oz as usize + od[2] * co, 0);
                            let irow = row_mut(gin, id, iy, iz, ci);
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if sx == 1 {
                                    let lo = px.saturating_sub(kx);
                                    let hi = (od[0] + px - kx).min(id[0]).max(lo);
                                    if lo < hi {
                                        let oshift = lo + kx - px;
                                        axpy(
                                            &mut irow[lo..hi],
                                            &grow[oshift..oshift + hi - lo],
                                            wv,
                                        );
                                    }
                                } else {
                                    for ix in 0..id[0] {
                                        let ox = (ix * sx + kx) as isize - px as isize;
                                        if ox >= 0 && (ox as usize) < od[0] {
                                            irow[ix] += wv * grow[ox as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of deconv3d w.r.t. weights and bias; accumulates into `gw`/`gbias`.
pub fn deconv3d_backward_weights(
    x: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    gw: &mut [f32],
    gbias: &mut [f32],
) {
    if is_k2s2p0(g) {
        return deconv3d_backward_weights_k2s2(x, gout, g, gw, gbias);
    }
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let k = g.kernel;
    let id = g.in_dims;
    let od = g.out_dims;

    for co in 0..g.cout {
        let plane_len = od[0] * od[1] * od[2];
        gbias[co] += sum_fixed(&gout[plane_len * co..plane_len * (co + 1)]);
    }
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for kz in 0..k[2] {
                for ky in 0..k[1] {
                    let wbase = k[0] * (ky + k[1] * (kz + k[2] * (ci + g.cin * co)));
                    for iz in 0..id[2] {
                        let oz = (iz * sz + kz) as isize - pz as isize;
                        if oz < 0 || oz as usize >= od[2] {
                            continue;
                        }
                        for iy in 0..id[1] {
                            let oy = (iy * sy + ky) as isize - py as isize;
                            if oy < 0 || oy as usize >= od[1] {
                                continue;
                            }
                            let grow =
                                row(gout, [od[0], od[1], od[2] * g.cout], oy as usize, oz as usize + od[2] * co, 0);
                            let irow = row(x, id, iy, iz, ci);
                            for kx in 0..k[0] {
                                if sx == 1 {
                                    let lo = px.saturating_sub(kx);
                                    let hi = (od[0] + px - kx).min(id[0]).max(lo);
                                    if lo < hi {
                                        let oshift = lo + kx - px;
                                        gw[wbase + kx] +=
                                            dot(&irow[lo..hi], &grow[oshift..oshift + hi - lo]);
                                    }
                                } else {
                                    let mut acc = 0f32;
                                    for ix in 0..id[0] {
                                        let ox = (ix * sx + kx) as isize - px as isize;
                                        if ox >= 0 && (ox as usize) < od[0] {
                                            acc += irow[ix] * grow[ox as usize];
                                        }
                                    }
                                    gw[wbase + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
