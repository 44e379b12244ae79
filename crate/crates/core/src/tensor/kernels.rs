//! Raw numeric kernels behind the tape operations.

use super::Tensor;

/// `C = A·B + beta·C` with arbitrary strides, `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if m * k == 0 { 0 } else { (m - 1) * rsa as usize + (k - 1) * csa as usize + 1 });
    // SAFETY: callers pass slices whose extents cover every strided index.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

/// Unfolds `C×H×W` into a `(C·k·k) × (H·W)` patch matrix for a same-size
/// convolution. Cells outside the image take the per-channel pad value.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, pad: &[f64]) -> Vec<f64> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let di = ki as isize - p;
                let dj = kj as isize - p;
                for y in 0..h {
                    let sy = y as isize + di;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(pad[ch]);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dj;
                        *o = if sx < 0 || sx >= w as isize { pad[ch] } else { src[sx as usize] };
                    }
                }
            }
        }
    }
    cols
}

/// `out = kernel · cols + bias`, `kernel` stored `O × (C·k·k)`.
pub(crate) fn conv_from_cols(cols: &[f64], kernel: &[f64], bias: &[f64], hw: usize, out: &mut [f64]) {
    let o = bias.len();
    let ckk = kernel.len() / o;
    for (oc, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[oc]);
    }
    gemm(o, ckk, hw, kernel, (ckk as isize, 1), cols, (hw as isize, 1), 1.0, out, (hw as isize, 1));
}

/// Same-size convolution of one `C×H×W` image without recording anything.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: &[f64]) -> Tensor {
    let [c, h, w] = input.shape()[..] else {
        panic!("conv2d_forward expects C×H×W, got {:?}", input.shape());
    };
    let [o, kc, k, _] = kernel.shape()[..] else {
        panic!("conv2d_forward kernel {:?}", kernel.shape());
    };
    assert_eq!(kc, c, "kernel channels");
    let cols = im2col(input.data(), c, h, w, k, pad);
    let mut out = vec![0.0; o * h * w];
    conv_from_cols(&cols, kernel.data(), bias.data(), h * w, &mut out);
    Tensor::from_vec(vec![o, h, w], out)
}

/// Adjoint of [`im2col`] restricted to in-image cells.
pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, grad: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut grad[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let di = ki as isize - p;
                let dj = kj as isize - p;
                for y in 0..h {
                    let sy = y as isize + di;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = x as isize + dj;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Surrounds a `C×H×W` tensor with a one-cell ring, channel `c` filled with
/// `values[c]`.
pub fn pad_ring(input: &Tensor, values: &[f64]) -> Tensor {
    let [c, h, w] = input.shape()[..] else {
        panic!("pad_ring expects C×H×W, got {:?}", input.shape());
    };
    assert_eq!(values.len(), c, "one pad value per channel");
    let (ph, pw) = (h + 2, w + 2);
    let mut data = Vec::with_capacity(c * ph * pw);
    for (ch, &v) in values.iter().enumerate() {
        data.extend(std::iter::repeat_n(v, pw));
        for y in 0..h {
            data.push(v);
            data.extend_from_slice(&input.data()[(ch * h + y) * w..][..w]);
            data.push(v);
        }
        data.extend(std::iter::repeat_n(v, pw));
    }
    Tensor::from_vec(vec![c, ph, pw], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_padding() {
        let t = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = pad_ring(&t, &[9.0, 0.0]);
        assert_eq!(p.shape(), &[2, 3, 4]);
        assert_eq!(&p.data()[..12], &[9.0, 9.0, 9.0, 9.0, 9.0, 1.0, 2.0, 9.0, 9.0, 9.0, 9.0, 9.0]);
        assert_eq!(&p.data()[12..], &[0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // A (2×3) · Bᵀ where B is stored 2×3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, (3, 1), &b, (1, 3), 0.0, &mut c, (2, 1));
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }
}
