//! Forward and backward numeric kernels behind the tape primitives.

use crate::error::{Error, Result};

use super::tape::Axes;
use super::tensor::Tensor;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    tensor(a.shape().to_vec(), data)
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip(a, b, f));
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() < sa.len() && sa.ends_with(sb) {
        let m = b.len();
        let data = a
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(tensor(sa.to_vec(), data));
    }
    Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
}

/// Sums `dy` over the leading axes that were broadcast to reach it from `shape`.
pub(crate) fn unbroadcast(dy: &Tensor, shape: &[usize]) -> Tensor {
    if dy.shape() == shape {
        return dy.clone();
    }
    let m: usize = shape.iter().product();
    let mut out = vec![0.0; m];
    for row in dy.data().chunks(m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    tensor(shape.to_vec(), out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("({m},{k}) x ({k2},{n})")));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(tensor(vec![m, n], out))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2("matmul")?;
    let (_, n) = b.dims2("matmul")?;
    let (ad, bd, gd) = (a.data(), b.data(), dy.data());
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
            let av = ad[i * k + p];
            for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * g;
            }
        }
    }
    Ok((tensor(vec![m, k], da), tensor(vec![k, n], db)))
}

/// Output-row range `[lo, hi)` for which input row `o + tap - pad` is inside `0..len`.
fn valid_range(len_in: usize, len_out: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len_in + pad).saturating_sub(tap).min(len_out);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let (b, ci, h, wd) = x.dims4("conv2d")?;
    let (co, ci2, kh, kw) = w.dims4("conv2d")?;
    if ci != ci2 {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, kernel expects {ci2}"),
        ));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    if let Some(bias) = bias {
        if bias.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}", bias.shape())));
        }
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let (xd, wdta) = (x.data(), w.data());
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * oh * ow..(bi * co + o + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for c in 0..ci {
                let xin = &xd[(bi * ci + c) * h * wd..(bi * ci + c + 1) * h * wd];
                for dy in 0..kh {
                    let (r0, r1) = valid_range(h, oh, dy, pad);
                    for dx in 0..kw {
                        let wv = wdta[((o * ci + c) * kh + dy) * kw + dx];
                        let (c0, c1) = valid_range(wd, ow, dx, pad);
                        for r in r0..r1 {
                            let ir = r + dy - pad;
                            let orow = &mut plane[r * ow + c0..r * ow + c1];
                            let irow = &xin[ir * wd + c0 + dx - pad..ir * wd + c1 + dx - pad];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(tensor(vec![b, co, oh, ow], out))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    pad: usize,
    has_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (b, ci, h, wd) = x.dims4("conv2d")?;
    let (co, _, kh, kw) = w.dims4("conv2d")?;
    let (_, _, oh, ow) = gy.dims4("conv2d")?;
    let (xd, wdta, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdta.len()];
    let mut gb = vec![0.0; co];
    for bi in 0..b {
        for o in 0..co {
            let gplane = &gd[(bi * co + o) * oh * ow..(bi * co + o + 1) * oh * ow];
            if has_bias {
                gb[o] += gplane.iter().sum::<f64>();
            }
            for c in 0..ci {
                let base = (bi * ci + c) * h * wd;
                for dy in 0..kh {
                    let (r0, r1) = valid_range(h, oh, dy, pad);
                    for dx in 0..kw {
                        let widx = ((o * ci + c) * kh + dy) * kw + dx;
                        let wv = wdta[widx];
                        let (c0, c1) = valid_range(wd, ow, dx, pad);
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            let ir = r + dy - pad;
                            let grow = &gplane[r * ow + c0..r * ow + c1];
                            let start = base + ir * wd + c0 + dx - pad;
                            let irow = &xd[start..start + (c1 - c0)];
                            let gxrow = &mut gx[start..start + (c1 - c0)];
                            for ((gv, iv), gxv) in grow.iter().zip(irow).zip(gxrow.iter_mut()) {
                                acc += gv * iv;
                                *gxv += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        tensor(x.shape().to_vec(), gx),
        tensor(w.shape().to_vec(), gw),
        has_bias.then(|| tensor(vec![co], gb)),
    ))
}

pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("avg_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2d", format!("spatial size {h}x{w} is not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let xin = &xd[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..oh {
            for q in 0..ow {
                let i = 2 * r * w + 2 * q;
                o[r * ow + q] = 0.25 * (xin[i] + xin[i + 1] + xin[i + w] + xin[i + w + 1]);
            }
        }
    }
    Ok(tensor(vec![b, c, oh, ow], out))
}

pub(crate) fn avg_pool2_backward(gy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (p, gplane) in gy.data().chunks(oh * ow).enumerate() {
        let g = &mut gx[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for q in 0..ow {
                let v = 0.25 * gplane[r * ow + q];
                let i = 2 * r * w + 2 * q;
                g[i] = v;
                g[i + 1] = v;
                g[i + w] = v;
                g[i + w + 1] = v;
            }
        }
    }
    tensor(in_shape.to_vec(), gx)
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("global_avg_pool")?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Ok(tensor(vec![b, c], data))
}

pub(crate) fn global_avg_pool_backward(gy: &Tensor, in_shape: &[usize]) -> Tensor {
    let hw = in_shape[2] * in_shape[3];
    let data = gy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
        .collect();
    tensor(in_shape.to_vec(), data)
}

/// Channel count and spatial size for (B,C) or (B,C,H,W) activations.
fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::shape(op, format!("expected (B,C) or (B,C,H,W), got {s:?}"))),
    }
}

pub(crate) fn channel_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, hw) = channel_layout("channel_affine", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let (g, bt) = (gamma.data(), beta.data());
    let data = x
        .data()
        .chunks(hw)
        .enumerate()
        .flat_map(|(p, plane)| {
            let ch = p % c;
            plane.iter().map(move |v| g[ch] * v + bt[ch])
        })
        .collect();
    Ok(tensor(x.shape().to_vec(), data))
}

pub(crate) fn channel_affine_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (_, c, hw) = channel_layout("channel_affine", x).expect("checked in forward");
    let g = gamma.data();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (p, (gplane, xplane)) in gy.data().chunks(hw).zip(x.data().chunks(hw)).enumerate() {
        let ch = p % c;
        for (i, (gv, xv)) in gplane.iter().zip(xplane).enumerate() {
            gx[p * hw + i] = g[ch] * gv;
            gg[ch] += gv * xv;
            gb[ch] += gv;
        }
    }
    (
        tensor(x.shape().to_vec(), gx),
        tensor(vec![c], gg),
        tensor(vec![c], gb),
    )
}

/// Per-channel batch mean and biased variance over all non-channel axes.
pub(crate) fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, hw) = channel_layout("batch_normalize", x)?;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    for (p, plane) in x.data().chunks(hw).enumerate() {
        mean[p % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let m = mean[p % c];
        var[p % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok((mean, var))
}

pub(crate) fn batch_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (_, c, hw) = channel_layout("batch_normalize", x)?;
    let (mean, var) = channel_moments(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let data = x
        .data()
        .chunks(hw)
        .enumerate()
        .flat_map(|(p, plane)| {
            let ch = p % c;
            let (m, s) = (mean[ch], inv_std[ch]);
            plane.iter().map(move |v| (v - m) * s)
        })
        .collect();
    Ok((tensor(x.shape().to_vec(), data), inv_std))
}

/// Gradient through normalization with batch statistics, including the
/// dependence of the mean and variance on every input.
pub(crate) fn batch_normalize_backward(xhat: &Tensor, inv_std: &[f64], gy: &Tensor) -> Tensor {
    let (b, c, hw) = channel_layout("batch_normalize", xhat).expect("checked in forward");
    let n = (b * hw) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (p, (gplane, xplane)) in gy.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
        let ch = p % c;
        for (g, xh) in gplane.iter().zip(xplane) {
            sum_g[ch] += g;
            sum_gx[ch] += g * xh;
        }
    }
    let data = gy
        .data()
        .chunks(hw)
        .zip(xhat.data().chunks(hw))
        .enumerate()
        .flat_map(|(p, (gplane, xplane))| {
            let ch = p % c;
            let (sg, sgx, s) = (sum_g[ch], sum_gx[ch], inv_std[ch]);
            gplane
                .iter()
                .zip(xplane)
                .map(move |(g, xh)| s / n * (n * g - sg - xh * sgx))
        })
        .collect();
    tensor(xhat.shape().to_vec(), data)
}

pub(crate) fn log_softmax(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap();
    let data = x
        .data()
        .chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse)
        })
        .collect();
    tensor(x.shape().to_vec(), data)
}

pub(crate) fn log_softmax_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let cols = *y.shape().last().unwrap();
    let data = y
        .data()
        .chunks(cols)
        .zip(gy.data().chunks(cols))
        .flat_map(|(yr, gr)| {
            let s: f64 = gr.iter().sum();
            yr.iter().zip(gr).map(move |(yv, g)| g - yv.exp() * s)
        })
        .collect();
    tensor(y.shape().to_vec(), data)
}

pub(crate) fn reduce_sum(x: &Tensor, axes: Axes) -> Tensor {
    match axes {
        Axes::All => Tensor::scalar(x.data().iter().sum()),
        Axes::Last => {
            let shape = x.shape();
            let cols = *shape.last().unwrap();
            let data: Vec<f64> = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
            let out_shape = if shape.len() > 1 {
                shape[..shape.len() - 1].to_vec()
            } else {
                vec![1]
            };
            tensor(out_shape, data)
        }
    }
}

pub(crate) fn reduce_backward(gy: &Tensor, in_shape: &[usize], axes: Axes, factor: f64) -> Tensor {
    let n: usize = in_shape.iter().product();
    let data = match axes {
        Axes::All => vec![gy.data()[0] * factor; n],
        Axes::Last => {
            let cols = *in_shape.last().unwrap();
            gy.data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * factor, cols))
                .collect()
        }
    };
    tensor(in_shape.to_vec(), data)
}

pub(crate) fn select_rows_backward(gy: &Tensor, in_shape: &[usize], rows: &[usize]) -> Tensor {
    let stride: usize = in_shape[1..].iter().product();
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (k, &r) in rows.iter().enumerate() {
        for (d, g) in gx[r * stride..(r + 1) * stride]
            .iter_mut()
            .zip(&gy.data()[k * stride..(k + 1) * stride])
        {
            *d += g;
        }
    }
    tensor(in_shape.to_vec(), gx)
}
