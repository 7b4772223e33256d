//! Single-sample kernels: same-padded convolution, 2×2 max-pooling and
//! dense layers, forward and backward. Tensors are channel-major
//! `[c][y][x]` with square planes of side `s`.

#[inline]
fn span(s: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (s as isize - offset).clamp(0, s as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward(x: &[f64], cin: usize, s: usize, w: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let plane = s * s;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(s, dy);
                for kx in 0..k {
                    let wv = w[((o * cin + i) * k + ky) * k + kx];
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(s, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * s + x0..y * s + x1];
                        let srow = &src[sy * s + (x0 as isize + dx) as usize..sy * s + (x1 as isize + dx) as usize];
                        for (d, v) in drow.iter_mut().zip(srow) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    cin: usize,
    s: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let plane = s * s;
    let pad = (k / 2) as isize;
    let mut dx_out = if need_dx { vec![0.0; cin * plane] } else { Vec::new() };
    for o in 0..cout {
        let g = &dz[o * plane..(o + 1) * plane];
        db[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(s, dy);
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let dxo = kx as isize - pad;
                    let (x0, x1) = span(s, dxo);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * s + x0..y * s + x1];
                        let a = sy * s + (x0 as isize + dxo) as usize;
                        let b = sy * s + (x1 as isize + dxo) as usize;
                        acc += grow.iter().zip(&src[a..b]).map(|(p, q)| p * q).sum::<f64>();
                        if need_dx {
                            let drow = &mut dx_out[i * plane + a..i * plane + b];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    dx_out
}

/// 2×2 stride-2 max-pool. Returns the pooled tensor and, per output, the
/// flat index of the first maximum in row-major window order.
pub(crate) fn maxpool_forward(r: &[f64], c: usize, s: usize) -> (Vec<f64>, Vec<u32>) {
    let so = s / 2;
    let mut out = Vec::with_capacity(c * so * so);
    let mut arg = Vec::with_capacity(c * so * so);
    for ch in 0..c {
        let base = ch * s * s;
        for oy in 0..so {
            for ox in 0..so {
                let mut best = base + 2 * oy * s + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s + 2 * ox + dx;
                    if r[idx] > r[best] {
                        best = idx;
                    }
                }
                out.push(r[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(d_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; input_len];
    for (g, &a) in d_out.iter().zip(argmax) {
        d[a as usize] += g;
    }
    d
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(j, &bj)| bj + w[j * x.len()..(j + 1) * x.len()].iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
        .collect()
}

pub(crate) fn dense_backward(x: &[f64], w: &[f64], dz: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (j, &g) in dz.iter().enumerate() {
        db[j] += g;
        let row = j * n..(j + 1) * n;
        for ((dwv, &xv), (dxv, &wv)) in dw[row.clone()].iter_mut().zip(x).zip(dx.iter_mut().zip(&w[row])) {
            *dwv += g * xv;
            *dxv += g * wv;
        }
    }
    dx
}

pub(crate) fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv_forward(&x, 1, 4, &w, &[0.0], 1, 3), x);
    }

    #[test]
    fn shift_kernel_pads_with_zero() {
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[5] = 1.0; // reads the right neighbour
        let y = conv_forward(&x, 1, 3, &w, &[0.5], 1, 3);
        assert_eq!(y, vec![2.5, 3.5, 0.5, 5.5, 6.5, 0.5, 8.5, 9.5, 0.5]);
    }

    #[test]
    fn pool_routes_gradient_to_unique_maxima() {
        let r = vec![1.0, 5.0, 2.0, 0.0, 3.0, 2.0, 9.0, 1.0, 0.0, 0.0, 0.0, 4.0, 7.0, 1.0, 0.0, 8.0];
        let (p, arg) = maxpool_forward(&r, 1, 4);
        assert_eq!(p, vec![5.0, 9.0, 7.0, 8.0]);
        let d = maxpool_backward(&[1.0, 2.0, 3.0, 4.0], &arg, 16);
        let mut expect = vec![0.0; 16];
        expect[1] = 1.0;
        expect[6] = 2.0;
        expect[12] = 3.0;
        expect[15] = 4.0;
        assert_eq!(d, expect);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax2(&[800.0, -3.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert_eq!(softmax2(&[0.0, 0.0]), [0.5, 0.5]);
    }
}
