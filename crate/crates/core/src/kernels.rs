//! Dense CPU kernels: convolution through im2col + sgemm, depthwise
//! convolution, and input resampling.

/// Geometry of a (possibly depthwise) 3D convolution over one sample.
/// 2D convolutions use a unit temporal kernel and a single frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depthwise: bool,
    /// `[t, h, w]`
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub input: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        std::array::from_fn(|d| (self.input[d] + 2 * self.pad[d] - self.kernel[d]) / self.stride[d] + 1)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    fn output_len(&self) -> usize {
        self.out_channels * self.output().iter().product::<usize>()
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Expected weight length for the active channels.
    pub fn weight_len(&self) -> usize {
        if self.depthwise {
            self.out_channels * self.kernel_volume()
        } else {
            self.out_channels * self.col_rows()
        }
    }
}

/// `c = a · b + beta · c` for row-major `m×k` and `k×n` operands, with
/// explicit strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the stride pairs describe views that stay within each slice,
    // checked by the callers through the lengths of `a`, `b` and `c`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let [it, ih, iw] = g.input;
    let [ot, oh, ow] = g.output();
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            let valid_th =
                                ti >= 0 && (ti as usize) < it && hi >= 0 && (hi as usize) < ih;
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                dst[idx] = if valid_th && wi >= 0 && (wi as usize) < iw {
                                    plane[(ti as usize * ih + hi as usize) * iw + wi as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let [it, ih, iw] = g.input;
    let [ot, oh, ow] = g.output();
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            let valid_th =
                                ti >= 0 && (ti as usize) < it && hi >= 0 && (hi as usize) < ih;
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if valid_th && wi >= 0 && (wi as usize) < iw {
                                    plane[(ti as usize * ih + hi as usize) * iw + wi as usize] +=
                                        src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution over a batch. `x` is `[N, Ci, T, H, W]`, `weight` is
/// `[Co, Ci, kt, kh, kw]` (or `[C, 1, kt, kh, kw]` when depthwise).
pub fn conv_forward(x: &[f32], batch: usize, g: &ConvGeom, weight: &[f32]) -> Vec<f32> {
    debug_assert_eq!(x.len(), batch * g.input_len());
    debug_assert_eq!(weight.len(), g.weight_len());
    let in_len = g.input_len();
    let out_len = g.output_len();
    let mut y = vec![0.0; batch * out_len];
    if g.depthwise {
        for n in 0..batch {
            depthwise_forward(&x[n * in_len..(n + 1) * in_len], g, weight, &mut y[n * out_len..(n + 1) * out_len]);
        }
        return y;
    }
    let rows = g.col_rows();
    let p: usize = g.output().iter().product();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * p] };
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let b = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        gemm(
            g.out_channels,
            rows,
            p,
            weight,
            (rows as isize, 1),
            b,
            (p as isize, 1),
            0.0,
            &mut y[n * out_len..(n + 1) * out_len],
        );
    }
    y
}

/// Backward convolution. Accumulates the weight gradient into `dweight`
/// and returns the input gradient when `need_dx` is set.
pub fn conv_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    let in_len = g.input_len();
    let out_len = g.output_len();
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    if g.depthwise {
        for n in 0..batch {
            depthwise_backward(
                &x[n * in_len..(n + 1) * in_len],
                g,
                weight,
                &dy[n * out_len..(n + 1) * out_len],
                dweight,
                dx.as_mut().map(|d| &mut d[n * in_len..(n + 1) * in_len]),
            );
        }
        return dx;
    }
    let rows = g.col_rows();
    let p: usize = g.output().iter().product();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * p] };
    let mut dcol = vec![0.0; rows * p];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let dys = &dy[n * out_len..(n + 1) * out_len];
        let b = if pointwise {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        // dW += dY · colᵀ
        gemm(g.out_channels, p, rows, dys, (p as isize, 1), b, (1, p as isize), 1.0, dweight);
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            gemm(rows, g.out_channels, p, weight, (1, rows as isize), dys, (p as isize, 1), 0.0, &mut dcol);
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                dxs.copy_from_slice(&dcol);
            } else {
                col2im(&dcol, g, dxs);
            }
        }
    }
    dx
}

fn depthwise_forward(x: &[f32], g: &ConvGeom, weight: &[f32], y: &mut [f32]) {
    let [it, ih, iw] = g.input;
    let [ot, oh, ow] = g.output();
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let kv = g.kernel_volume();
    for c in 0..g.out_channels {
        let plane = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        let wk = &weight[c * kv..(c + 1) * kv];
        let out = &mut y[c * ot * oh * ow..(c + 1) * ot * oh * ow];
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let mut acc = 0.0;
                    for dt in 0..kt {
                        let ti = (t * st + dt) as isize - pt as isize;
                        if ti < 0 || ti as usize >= it {
                            continue;
                        }
                        for dh in 0..kh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi as usize >= ih {
                                continue;
                            }
                            for dw in 0..kw {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if wi < 0 || wi as usize >= iw {
                                    continue;
                                }
                                acc += wk[(dt * kh + dh) * kw + dw]
                                    * plane[(ti as usize * ih + hi as usize) * iw + wi as usize];
                            }
                        }
                    }
                    out[(t * oh + h) * ow + w] = acc;
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f32],
    g: &ConvGeom,
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let [it, ih, iw] = g.input;
    let [ot, oh, ow] = g.output();
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let kv = g.kernel_volume();
    let plane_len = it * ih * iw;
    for c in 0..g.out_channels {
        let plane = &x[c * plane_len..(c + 1) * plane_len];
        let wk = &weight[c * kv..(c + 1) * kv];
        let dwk = &mut dweight[c * kv..(c + 1) * kv];
        let grad = &dy[c * ot * oh * ow..(c + 1) * ot * oh * ow];
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let gv = grad[(t * oh + h) * ow + w];
                    if gv == 0.0 {
                        continue;
                    }
                    for dt in 0..kt {
                        let ti = (t * st + dt) as isize - pt as isize;
                        if ti < 0 || ti as usize >= it {
                            continue;
                        }
                        for dh in 0..kh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi as usize >= ih {
                                continue;
                            }
                            for dw in 0..kw {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if wi < 0 || wi as usize >= iw {
                                    continue;
                                }
                                let xi = (ti as usize * ih + hi as usize) * iw + wi as usize;
                                let ki = (dt * kh + dh) * kw + dw;
                                dwk[ki] += gv * plane[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[c * plane_len + xi] += gv * wk[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = x · Wᵀ + b` for `x: [N, Ci]`, `weight: [Co, Ci]`.
pub fn linear_forward(x: &[f32], batch: usize, ci: usize, co: usize, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0; batch * co];
    for n in 0..batch {
        y[n * co..(n + 1) * co].copy_from_slice(bias);
    }
    gemm(batch, ci, co, x, (ci as isize, 1), weight, (1, ci as isize), 1.0, &mut y);
    y
}

/// Accumulates `dW += dyᵀ · x`, `db += Σ dy` and returns `dx = dy · W`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    batch: usize,
    ci: usize,
    co: usize,
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Vec<f32> {
    gemm(co, batch, ci, dy, (1, co as isize), x, (ci as isize, 1), 1.0, dweight);
    for n in 0..batch {
        for (db, g) in dbias.iter_mut().zip(&dy[n * co..(n + 1) * co]) {
            *db += g;
        }
    }
    let mut dx = vec![0.0; batch * ci];
    gemm(batch, co, ci, dy, (co as isize, 1), weight, (ci as isize, 1), 0.0, &mut dx);
    dx
}

/// Bilinear resampling of `planes` independent `ih×iw` planes, half-pixel
/// centres (corner alignment disabled).
pub fn resize_bilinear(x: &[f32], planes: usize, ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f32> {
    if ih == oh && iw == ow {
        return x.to_vec();
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let rows = taps(ih, oh);
    let cols = taps(iw, ow);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
            for (c, &(c0, c1, lc)) in cols.iter().enumerate() {
                let top = src[r0 * iw + c0] * (1.0 - lc) + src[r0 * iw + c1] * lc;
                let bottom = src[r1 * iw + c0] * (1.0 - lc) + src[r1 * iw + c1] * lc;
                dst[r * ow + c] = top * (1.0 - lr) + bottom * lr;
            }
        }
    }
    y
}

/// Uniform stride-index temporal selection: output frame `i` is input frame
/// `floor(i · T / T')`.
pub fn frame_indices(input_frames: usize, output_frames: usize) -> Vec<usize> {
    (0..output_frames)
        .map(|i| i * input_frames / output_frames)
        .collect()
}

/// Selects frames from `[outer, T, inner]` data.
pub fn select_frames(x: &[f32], outer: usize, frames: usize, inner: usize, picks: &[usize]) -> Vec<f32> {
    let mut y = Vec::with_capacity(outer * picks.len() * inner);
    for o in 0..outer {
        let block = &x[o * frames * inner..(o + 1) * frames * inner];
        for &f in picks {
            y.extend_from_slice(&block[f * inner..(f + 1) * inner]);
        }
    }
    y
}
