//! Spatial-op kernels shared by graph forward and backward passes.
//!
//! All loops run in a fixed serial order so repeated evaluation is
//! bit-identical. Layouts: activations are [C, H, W] row-major, conv
//! weights [Cout, Cin, KH, KW], biases [Cout].

/// 2-D convolution, stride 1, zero-padded to preserve H x W. Kernel sides
/// must be odd.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    debug_assert!(kh % 2 == 1 && kw % 2 == 1);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let orow = &mut out[co * hw..(co + 1) * hw];
        orow.fill(b[co]);
        for ci in 0..cin {
            let xplane = &x[ci * hw..(ci + 1) * hw];
            for u in 0..kh {
                // Output rows i with a valid source row i + u - ph.
                let i_lo = ph.saturating_sub(u);
                let i_hi = (h + ph).saturating_sub(u).min(h);
                for v in 0..kw {
                    let wv = w[((co * cin + ci) * kh + u) * kw + v];
                    // Output cols j with a valid source col j + v - pw.
                    let j_lo = pw.saturating_sub(v);
                    let j_hi = (wd + pw).saturating_sub(v).min(wd);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let si = i + u - ph;
                        let src = &xplane[si * wd + j_lo + v - pw..si * wd + j_hi + v - pw];
                        let dst = &mut orow[i * wd + j_lo..i * wd + j_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut dx = vec![0.0; cin * hw];
    // dx[ci][si][sj] += w[co][ci][u][v] * g[co][si - u + ph][sj - v + pw]:
    // iterate the same (co, ci, u, v) tiling as forward, scattering into
    // the source rows instead.
    for co in 0..cout {
        let gplane = &g[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let dplane = &mut dx[ci * hw..(ci + 1) * hw];
            for u in 0..kh {
                let i_lo = ph.saturating_sub(u);
                let i_hi = (h + ph).saturating_sub(u).min(h);
                for v in 0..kw {
                    let wv = w[((co * cin + ci) * kh + u) * kw + v];
                    let j_lo = pw.saturating_sub(v);
                    let j_hi = (wd + pw).saturating_sub(v).min(wd);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let si = i + u - ph;
                        let grow = &gplane[i * wd + j_lo..i * wd + j_hi];
                        let drow =
                            &mut dplane[si * wd + j_lo + v - pw..si * wd + j_hi + v - pw];
                        for (d, gg) in drow.iter_mut().zip(grow) {
                            *d += wv * gg;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of conv2d w.r.t. weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_params(
    g: &[f64],
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut dw = vec![0.0; cout * cin * kh * kw];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &g[co * hw..(co + 1) * hw];
        db[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xplane = &x[ci * hw..(ci + 1) * hw];
            for u in 0..kh {
                let i_lo = ph.saturating_sub(u);
                let i_hi = (h + ph).saturating_sub(u).min(h);
                for v in 0..kw {
                    let j_lo = pw.saturating_sub(v);
                    let j_hi = (wd + pw).saturating_sub(v).min(wd);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let si = i + u - ph;
                        let grow = &gplane[i * wd + j_lo..i * wd + j_hi];
                        let xrow = &xplane[si * wd + j_lo + v - pw..si * wd + j_hi + v - pw];
                        for (gg, xx) in grow.iter().zip(xrow) {
                            acc += gg * xx;
                        }
                    }
                    dw[((co * cin + ci) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
    (dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, per
/// output element, the flat index of the winning input. Ties go to the
/// first maximum in row-major window order (strictly-greater comparison).
pub fn maxpool2_forward(x: &[f64], c: usize, h: usize, wd: usize) -> (Vec<f64>, Vec<usize>) {
    debug_assert!(h % 2 == 0 && wd % 2 == 0);
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * wd..(ch + 1) * h * wd];
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = (2 * i) * wd + 2 * j;
                let mut best = plane[best_idx];
                for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * i + du) * wd + 2 * j + dv;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[(ch * oh + i) * ow + j] = best;
                arg[(ch * oh + i) * ow + j] = ch * h * wd + best_idx;
            }
        }
    }
    (out, arg)
}

/// Scatter of pooled gradients back to the argmax positions.
pub fn maxpool2_backward(g: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (gv, &idx) in g.iter().zip(arg) {
        dx[idx] += gv;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[(ch * h + i) * wd..(ch * h + i + 1) * wd];
            for di in 0..2 {
                let orow = &mut out[(ch * oh + 2 * i + di) * ow..(ch * oh + 2 * i + di + 1) * ow];
                for (j, &v) in src.iter().enumerate() {
                    orow[2 * j] = v;
                    orow[2 * j + 1] = v;
                }
            }
        }
    }
    out
}

/// Each source pixel collects its four upsampled copies, fixed order.
pub fn upsample2_backward(g: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = vec![0.0; c * h * wd];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += g[(ch * oh + 2 * i + di) * ow + 2 * j + dj];
                    }
                }
                dx[(ch * h + i) * wd + j] = acc;
            }
        }
    }
    dx
}
