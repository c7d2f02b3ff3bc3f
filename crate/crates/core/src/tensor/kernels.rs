//! Dense numeric kernels used by the tape: GEMM and the im2col/col2im pair
//! behind 3D convolution.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `a_t` set, `a` is stored as the row-major `k x m` matrix whose transpose is used;
/// likewise for `b_t` (`b` stored as `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a single-sample 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input or a stride is zero.
    pub fn new(
        cin: usize,
        input: [usize; 3],
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || kernel[d] == 0 || kernel[d] > input[d] + 2 * pad[d] {
                return None;
            }
            output[d] = (input[d] + 2 * pad[d] - kernel[d]) / stride[d] + 1;
        }
        Some(ConvGeom {
            cin,
            input,
            cout,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Unfolds `x` (`cin x T x H x W`) into a `(cin*kT*kH*kW) x (T'*H'*W')` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let npos = g.out_positions();
    let mut cols = vec![0.0; g.col_rows() * npos];
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for a in 0..ot {
                        let it = (a * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for b in 0..oh {
                            let ih = (b * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &xc[(it as usize * h + ih as usize) * w..][..w];
                            let out = &mut dst[(a * oh + b) * ow..][..ow];
                            for (c, o) in out.iter_mut().enumerate() {
                                let iw = (c * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    *o = src[iw as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column-matrix gradient back onto the input layout.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let npos = g.out_positions();
    let mut x = vec![0.0; g.cin * t * h * w];
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * npos..(row + 1) * npos];
                    for a in 0..ot {
                        let it = (a * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for b in 0..oh {
                            let ih = (b * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dst = &mut xc[(it as usize * h + ih as usize) * w..][..w];
                            let inp = &src[(a * oh + b) * ow..][..ow];
                            for (c, v) in inp.iter().enumerate() {
                                let iw = (c * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    dst[iw as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}
