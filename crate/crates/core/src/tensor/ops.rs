//! Forward kernels and their backward rules.
//!
//! Convolution is cross-correlation (no kernel flip). `conv2d` lowers to
//! im2col + gemm; `conv2d_transpose` scatters through the *same* geometry
//! (col2im), which makes it the exact adjoint of `conv2d` by construction.

use super::{Op, Result, Scalar, Tensor, TensorError};

/// Spatial padding rule for `conv2d`.
///
/// `Same` pads so that the output extent is `ceil(in / stride)`; when the
/// total padding is odd the extra pixel goes on the bottom/right. `Valid`
/// uses no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn want_rank<E: Scalar>(op: &'static str, t: &Tensor<E>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(invalid(
            op,
            format!("expected rank-{rank} tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.clone(), b.clone()))
}

pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.clone(), b.clone()))
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.clone(), b.clone()))
}

fn binary_elementwise<E: Scalar>(
    name: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
    op: Op<E>,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::result(out, a.shape().to_vec(), op))
}

pub fn scale<E: Scalar>(a: &Tensor<E>, factor: E) -> Tensor<E> {
    let out = a.data().iter().map(|&x| x * factor).collect();
    Tensor::result(out, a.shape().to_vec(), Op::Scale(a.clone(), factor))
}

/// Broadcast `bias` (shape `[C]`) over the last axis of `a` (shape `[.., C]`).
pub fn add_bias<E: Scalar>(a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    want_rank("add_bias", bias, 1)?;
    let c = bias.shape()[0];
    if a.shape().last() != Some(&c) {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let bias_data = bias.data();
    let out = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bias_data[i % c])
        .collect();
    drop(bias_data);
    Ok(Tensor::result(
        out,
        a.shape().to_vec(),
        Op::AddBias(a.clone(), bias.clone()),
    ))
}

pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    want_rank("matmul", a, 2)?;
    want_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![E::ZERO; m * n];
    gemm_rm(m, k, n, &a.data(), false, &b.data(), false, &mut out);
    Ok(Tensor::result(
        out,
        vec![m, n],
        Op::Matmul(a.clone(), b.clone()),
    ))
}

/// `input [N, F] × weight [F, G] + bias [G]`.
pub fn linear<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    add_bias(&matmul(input, weight)?, bias)
}

pub fn relu<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let out = a.data().iter().map(|&x| x.maximum(E::ZERO)).collect();
    Tensor::result(out, a.shape().to_vec(), Op::Relu(a.clone()))
}

pub fn sigmoid<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let out = a
        .data()
        .iter()
        .map(|&x| E::ONE / (E::ONE + (-x).exp()))
        .collect();
    Tensor::result(out, a.shape().to_vec(), Op::Sigmoid(a.clone()))
}

pub fn reshape<E: Scalar>(a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let numel: usize = shape.iter().product();
    if numel != a.len() {
        return Err(TensorError::ShapeMismatch {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(Tensor::result(
        a.to_vec(),
        shape.to_vec(),
        Op::Reshape(a.clone()),
    ))
}

pub fn sum_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for &x in a.data().iter() {
        acc += x;
    }
    Tensor::result(vec![acc], vec![1], Op::SumAll(a.clone()))
}

pub fn mean_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for &x in a.data().iter() {
        acc += x;
    }
    let n = E::from_f64(a.len() as f64);
    Tensor::result(vec![acc / n], vec![1], Op::MeanAll(a.clone()))
}

/// Mean softmax cross-entropy between `logits [N, C]` and integer labels.
///
/// Fused (log-sum-exp with max subtraction) for numerical stability; the
/// backward rule is the usual `softmax − one_hot`, divided by `N`.
pub fn softmax_cross_entropy<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    want_rank("softmax_cross_entropy", logits, 2)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(invalid(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    for &l in labels {
        if l >= c {
            return Err(TensorError::LabelOutOfRange { label: l, classes: c });
        }
    }
    let data = logits.data();
    let mut total = E::ZERO;
    for (i, &label) in labels.iter().enumerate() {
        let row = &data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(row[0], E::maximum);
        let mut sum = E::ZERO;
        for &x in row {
            sum += (x - max).exp();
        }
        total += sum.ln() + max - row[label];
    }
    drop(data);
    let loss = total / E::from_f64(n as f64);
    Ok(Tensor::result(
        vec![loss],
        vec![1],
        Op::SoftmaxCrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
        },
    ))
}

/// Mean binary cross-entropy `−t·ln(p) − (1−t)·ln(1−p)` over all elements.
///
/// Predictions are clamped to `[1e-7, 1−1e-7]` before the logarithm; the
/// gradient is zero where the clamp is active.
pub fn binary_cross_entropy<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "binary_cross_entropy",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let eps = E::from_f64(1e-7);
    let one = E::ONE;
    let mut total = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let p = clamp(p, eps, one - eps);
        total += -(t * p.ln() + (one - t) * (one - p).ln());
    }
    let loss = total / E::from_f64(pred.len() as f64);
    Ok(Tensor::result(
        vec![loss],
        vec![1],
        Op::BinaryCrossEntropy {
            pred: pred.clone(),
            target: target.to_vec(),
        },
    ))
}

fn clamp<E: Scalar>(x: E, lo: E, hi: E) -> E {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

/// Geometry of one conv2d application: how output cells map onto the
/// (possibly padded) input. `conv2d_transpose` reuses the same geometry in
/// the scatter direction, which is what makes the two operations adjoint.
#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub n: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 {
            return Err(invalid(
                op,
                format!("expected NHWC input, got shape {input_shape:?}"),
            ));
        }
        if kernel_shape.len() != 4 {
            return Err(invalid(
                op,
                format!("expected KhKwCinCout kernel, got shape {kernel_shape:?}"),
            ));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be at least 1"));
        }
        let (n, in_h, in_w, cin) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (kh, kw, kcin, cout) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if cin != kcin {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: input_shape.to_vec(),
                rhs: kernel_shape.to_vec(),
            });
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let total_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
                let total_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
                // Extra pixel of an odd total goes on the bottom/right.
                (out_h, out_w, total_h / 2, total_w / 2)
            }
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    return Err(invalid(
                        op,
                        format!("kernel {kh}×{kw} larger than input {in_h}×{in_w} without padding"),
                    ));
                }
                ((in_h - kh) / stride + 1, (in_w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Gather conv patches into a `[rows × cols]` matrix; padding reads as zero.
fn im2col<E: Scalar>(input: &[E], g: &ConvGeom) -> Vec<E> {
    let k = g.cols();
    let mut out = vec![E::ZERO; g.rows() * k];
    let mut row = 0;
    for b in 0..g.n {
        let base = b * g.in_h * g.in_w * g.cin;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut out[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = base + ((iy as usize * g.in_w) + ix as usize) * g.cin;
                        let col = (ky * g.kw + kx) * g.cin;
                        dst[col..col + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch values back onto input positions.
fn col2im<E: Scalar>(cols: &[E], g: &ConvGeom) -> Vec<E> {
    let k = g.cols();
    let mut out = vec![E::ZERO; g.n * g.in_h * g.in_w * g.cin];
    let mut row = 0;
    for b in 0..g.n {
        let base = b * g.in_h * g.in_w * g.cin;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src_row = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + ((iy as usize * g.in_w) + ix as usize) * g.cin;
                        let col = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            out[dst + c] += src_row[col + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Row-major gemm wrapper: `c = a (or aᵀ) × b (or bᵀ)` with `c` `[m × n]`.
/// `a` is `[m × k]` before transposition, `b` is `[k × n]`.
fn gemm_rm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    trans_a: bool,
    b: &[E],
    trans_b: bool,
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            E::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation of an NHWC `input` with a KhKwCinCout `kernel`,
/// plus a per-output-channel `bias`.
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    let g = ConvGeom::new("conv2d", input.shape(), kernel.shape(), stride, padding)?;
    want_rank("conv2d", bias, 1)?;
    if bias.shape()[0] != g.cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let cols = im2col(&input.data(), &g);
    let mut out = vec![E::ZERO; g.rows() * g.cout];
    gemm_rm(
        g.rows(),
        g.cols(),
        g.cout,
        &cols,
        false,
        &kernel.data(),
        false,
        &mut out,
    );
    let raw = Tensor::result(
        out,
        vec![g.n, g.out_h, g.out_w, g.cout],
        Op::Conv2d {
            input: input.clone(),
            kernel: kernel.clone(),
            stride,
            padding,
        },
    );
    add_bias(&raw, bias)
}

/// Adjoint of [`conv2d`] with the same kernel and geometry, plus bias.
///
/// `input` is `[N, h, w, Cout]`; the result is `[N, h·stride, w·stride, Cin]`
/// (SAME convention), where `Cin`/`Cout` refer to the kernel's
/// KhKwCinCout layout. `bias` has extent `Cin`.
pub fn conv2d_transpose<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>> {
    let g = transpose_geom("conv2d_transpose", input.shape(), kernel.shape(), stride)?;
    want_rank("conv2d_transpose", bias, 1)?;
    if bias.shape()[0] != g.cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_transpose",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    // input rows × kernelᵀ gives the patch matrix; scattering it through the
    // shared geometry is the transpose of conv2d's gather+gemm.
    let mut cols = vec![E::ZERO; g.rows() * g.cols()];
    gemm_rm(
        g.rows(),
        g.cout,
        g.cols(),
        &input.data(),
        false,
        &kernel.data(),
        true,
        &mut cols,
    );
    let out = col2im(&cols, &g);
    let raw = Tensor::result(
        out,
        vec![g.n, g.in_h, g.in_w, g.cin],
        Op::ConvTranspose2d {
            input: input.clone(),
            kernel: kernel.clone(),
            stride,
        },
    );
    add_bias(&raw, bias)
}

/// Geometry of the conv2d whose adjoint a transpose application realizes:
/// the transpose's input plays the conv output, and its output (extent ×
/// stride, SAME) plays the conv input.
fn transpose_geom(
    op: &'static str,
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
) -> Result<ConvGeom> {
    if input_shape.len() != 4 {
        return Err(invalid(
            op,
            format!("expected NHWC input, got shape {input_shape:?}"),
        ));
    }
    if kernel_shape.len() != 4 {
        return Err(invalid(
            op,
            format!("expected KhKwCinCout kernel, got shape {kernel_shape:?}"),
        ));
    }
    if input_shape[3] != kernel_shape[3] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: input_shape.to_vec(),
            rhs: kernel_shape.to_vec(),
        });
    }
    let full_shape = [
        input_shape[0],
        input_shape[1] * stride,
        input_shape[2] * stride,
        kernel_shape[2],
    ];
    let g = ConvGeom::new(op, &full_shape, kernel_shape, stride, Padding::Same)?;
    debug_assert_eq!(g.out_h, input_shape[1]);
    debug_assert_eq!(g.out_w, input_shape[2]);
    Ok(g)
}

/// Max over non-overlapping (or strided) windows; gradient flows to the
/// argmax cell of each window (first occurrence on ties).
pub fn maxpool2d<E: Scalar>(input: &Tensor<E>, window: usize, stride: usize) -> Result<Tensor<E>> {
    want_rank("maxpool2d", input, 4)?;
    if window == 0 || stride == 0 {
        return Err(invalid("maxpool2d", "window and stride must be at least 1"));
    }
    let (n, in_h, in_w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if in_h < window || in_w < window || (in_h - window) % stride != 0 || (in_w - window) % stride != 0
    {
        return Err(invalid(
            "maxpool2d",
            format!("window {window} stride {stride} does not tile {in_h}×{in_w} input"),
        ));
    }
    let out_h = (in_h - window) / stride + 1;
    let out_w = (in_w - window) / stride + 1;
    let data = input.data();
    let mut out = vec![E::ZERO; n * out_h * out_w * c];
    let mut argmax = vec![0usize; out.len()];
    let mut o = 0;
    for b in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ch in 0..c {
                    let mut best_idx = 0;
                    let mut best = E::ZERO;
                    let mut first = true;
                    for ky in 0..window {
                        let iy = oy * stride + ky;
                        for kx in 0..window {
                            let ix = ox * stride + kx;
                            let idx = ((b * in_h + iy) * in_w + ix) * c + ch;
                            let v = data[idx];
                            if first || v > best {
                                best = v;
                                best_idx = idx;
                                first = false;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    drop(data);
    Ok(Tensor::result(
        out,
        vec![n, out_h, out_w, c],
        Op::MaxPool2d {
            input: input.clone(),
            argmax,
        },
    ))
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

impl<E: Scalar> Op<E> {
    pub(super) fn backward(&self, grad: &[E], out: &Tensor<E>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(grad);
                }
                if b.requires_grad() {
                    b.accumulate_grad(grad);
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(grad);
                }
                if b.requires_grad() {
                    let neg: Vec<E> = grad.iter().map(|&g| -g).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let da: Vec<E> = grad
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<E> = grad
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    b.accumulate_grad(&db);
                }
            }
            Op::Scale(a, factor) => {
                if a.requires_grad() {
                    let da: Vec<E> = grad.iter().map(|&g| g * *factor).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::AddBias(a, bias) => {
                if a.requires_grad() {
                    a.accumulate_grad(grad);
                }
                if bias.requires_grad() {
                    let c = bias.len();
                    let mut db = vec![E::ZERO; c];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % c] += g;
                    }
                    bias.accumulate_grad(&db);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    // dA = dC × Bᵀ
                    let mut da = vec![E::ZERO; m * k];
                    gemm_rm(m, n, k, grad, false, &b.data(), true, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = Aᵀ × dC
                    let mut db = vec![E::ZERO; k * n];
                    gemm_rm(k, m, n, &a.data(), true, grad, false, &mut db);
                    b.accumulate_grad(&db);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let da: Vec<E> = out
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| if y > E::ZERO { g } else { E::ZERO })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let da: Vec<E> = out
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g * y * (E::ONE - y))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(grad);
                }
            }
            Op::SumAll(a) => {
                if a.requires_grad() {
                    let da = vec![grad[0]; a.len()];
                    a.accumulate_grad(&da);
                }
            }
            Op::MeanAll(a) => {
                if a.requires_grad() {
                    let g = grad[0] / E::from_f64(a.len() as f64);
                    let da = vec![g; a.len()];
                    a.accumulate_grad(&da);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeom::new("conv2d", input.shape(), kernel.shape(), *stride, *padding)
                    .expect("geometry validated in forward");
                if kernel.requires_grad() {
                    // dK = colsᵀ × dOut
                    let cols = im2col(&input.data(), &g);
                    let mut dk = vec![E::ZERO; g.cols() * g.cout];
                    gemm_rm(g.cols(), g.rows(), g.cout, &cols, true, grad, false, &mut dk);
                    kernel.accumulate_grad(&dk);
                }
                if input.requires_grad() {
                    // dX = col2im(dOut × Kᵀ)
                    let mut dcols = vec![E::ZERO; g.rows() * g.cols()];
                    gemm_rm(
                        g.rows(),
                        g.cout,
                        g.cols(),
                        grad,
                        false,
                        &kernel.data(),
                        true,
                        &mut dcols,
                    );
                    input.accumulate_grad(&col2im(&dcols, &g));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
            } => {
                let g = transpose_geom(
                    "conv2d_transpose",
                    input.shape(),
                    kernel.shape(),
                    *stride,
                )
                .expect("geometry validated in forward");
                // The adjoint of a scatter is the matching gather.
                let gcols = im2col(grad, &g);
                if input.requires_grad() {
                    // dY = im2col(dOut) × K
                    let mut dy = vec![E::ZERO; g.rows() * g.cout];
                    gemm_rm(
                        g.rows(),
                        g.cols(),
                        g.cout,
                        &gcols,
                        false,
                        &kernel.data(),
                        false,
                        &mut dy,
                    );
                    input.accumulate_grad(&dy);
                }
                if kernel.requires_grad() {
                    // dK = im2col(dOut)ᵀ × Y
                    let mut dk = vec![E::ZERO; g.cols() * g.cout];
                    gemm_rm(
                        g.cols(),
                        g.rows(),
                        g.cout,
                        &gcols,
                        true,
                        &input.data(),
                        false,
                        &mut dk,
                    );
                    kernel.accumulate_grad(&dk);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if input.requires_grad() {
                    let mut da = vec![E::ZERO; input.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        da[src] += grad[o];
                    }
                    input.accumulate_grad(&da);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if logits.requires_grad() {
                    let (n, c) = (logits.shape()[0], logits.shape()[1]);
                    let data = logits.data();
                    let scale = grad[0] / E::from_f64(n as f64);
                    let mut dl = vec![E::ZERO; n * c];
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &data[i * c..(i + 1) * c];
                        let max = row.iter().copied().fold(row[0], E::maximum);
                        let mut sum = E::ZERO;
                        for &x in row {
                            sum += (x - max).exp();
                        }
                        for (j, &x) in row.iter().enumerate() {
                            let softmax = (x - max).exp() / sum;
                            let delta = if j == label { E::ONE } else { E::ZERO };
                            dl[i * c + j] = scale * (softmax - delta);
                        }
                    }
                    drop(data);
                    logits.accumulate_grad(&dl);
                }
            }
            Op::BinaryCrossEntropy { pred, target } => {
                if pred.requires_grad() {
                    let eps = E::from_f64(1e-7);
                    let one = E::ONE;
                    let scale = grad[0] / E::from_f64(pred.len() as f64);
                    let dp: Vec<E> = pred
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| {
                            if p < eps || p > one - eps {
                                E::ZERO // clamp active: loss is flat in p here
                            } else {
                                scale * (p - t) / (p * (one - p))
                            }
                        })
                        .collect();
                    pred.accumulate_grad(&dp);
                }
            }
        }
    }
}
