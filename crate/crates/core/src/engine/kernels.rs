//! Slice-level forward/backward kernels behind the graph operations.
//!
//! Spatial tensors are NHWC; convolution kernels are `[kh, kw, cin, cout]`
//! so that the im2col matrix times the kernel viewed as
//! `[kh·kw·cin, cout]` lands directly in NHWC order.

use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    fn pad_h(&self) -> isize {
        (self.kernel_h / 2) as isize
    }

    fn pad_w(&self) -> isize {
        (self.kernel_w / 2) as isize
    }
}

/// Input columns `[x0, x1)` that kernel row taps starting at column `x`
/// cover, with the number of zero-padded taps on the left.
fn tap_span(x: usize, g: &ConvGeometry) -> (usize, usize, usize) {
    let left = x as isize - g.pad_w();
    let x0 = left.max(0) as usize;
    let x1 = ((left + g.kernel_w as isize) as usize).min(g.width);
    (x0, x1, (x0 as isize - left) as usize)
}

/// Unfolds zero-padded "same" patches into `rows × patch` columns.
pub fn im2col_vec<R: Real>(input: &[R], g: &ConvGeometry) -> Vec<R> {
    let mut cols = Vec::with_capacity(g.rows() * g.patch());
    im2col_into(input, g, &mut cols);
    cols
}

/// [`im2col_vec`] reusing the allocation of `cols`.
pub fn im2col_into<R: Real>(input: &[R], g: &ConvGeometry, cols: &mut Vec<R>) {
    let cin = g.in_channels;
    let span = g.kernel_w * cin;
    cols.clear();
    for b in 0..g.batch {
        for y in 0..g.height {
            for x in 0..g.width {
                let (x0, x1, skip) = tap_span(x, g);
                for ky in 0..g.kernel_h {
                    let iy = y as isize + ky as isize - g.pad_h();
                    if iy < 0 || iy >= g.height as isize {
                        cols.resize(cols.len() + span, R::zero());
                        continue;
                    }
                    let base = (b * g.height + iy as usize) * g.width;
                    cols.resize(cols.len() + skip * cin, R::zero());
                    cols.extend_from_slice(&input[(base + x0) * cin..(base + x1) * cin]);
                    cols.resize(cols.len() + (g.kernel_w - skip - (x1 - x0)) * cin, R::zero());
                }
            }
        }
    }
}

/// [`im2col_vec`] into an existing buffer.
pub fn im2col<R: Real>(input: &[R], g: &ConvGeometry, cols: &mut [R]) {
    cols.copy_from_slice(&im2col_vec(input, g));
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `grad_input`.
pub fn col2im<R: Real>(cols: &[R], g: &ConvGeometry, grad_input: &mut [R]) {
    let cin = g.in_channels;
    let patch = g.patch();
    let span = g.kernel_w * cin;
    for b in 0..g.batch {
        for y in 0..g.height {
            for x in 0..g.width {
                let row = (b * g.height + y) * g.width + x;
                let (x0, x1, skip) = tap_span(x, g);
                for ky in 0..g.kernel_h {
                    let iy = y as isize + ky as isize - g.pad_h();
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (b * g.height + iy as usize) * g.width;
                    let src = &cols[row * patch + ky * span + skip * cin..][..(x1 - x0) * cin];
                    let dst = &mut grad_input[(base + x0) * cin..(base + x1) * cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

impl ConvGeometry {
    fn single(&self) -> Self {
        Self { batch: 1, ..*self }
    }
}

/// Convolution output, one batch element at a time so the unfolded patches
/// stay small.
pub fn conv2d_forward<R: Real>(input: &[R], kernel: &[R], bias: &[R], g: &ConvGeometry) -> Vec<R> {
    let one = g.single();
    let (per_in, per_out) = (one.rows() * g.in_channels, one.rows() * g.out_channels);
    let mut out = Vec::with_capacity(g.rows() * g.out_channels);
    for _ in 0..g.rows() {
        out.extend_from_slice(bias);
    }
    let mut cols = Vec::with_capacity(one.rows() * one.patch());
    for b in 0..g.batch {
        im2col_into(&input[b * per_in..(b + 1) * per_in], &one, &mut cols);
        let dst = &mut out[b * per_out..(b + 1) * per_out];
        R::gemm(one.rows(), one.patch(), g.out_channels, &cols, false, kernel, false, dst, true);
    }
    out
}

/// Kernel and input gradients of a convolution, each only when requested.
pub fn conv2d_backward<R: Real>(
    input: &[R],
    kernel: &[R],
    grad_out: &[R],
    g: &ConvGeometry,
    want_kernel: bool,
    want_input: bool,
) -> (Option<Vec<R>>, Option<Vec<R>>) {
    let one = g.single();
    let (per_in, per_out) = (one.rows() * g.in_channels, one.rows() * g.out_channels);
    let mut dk = want_kernel.then(|| vec![R::zero(); g.patch() * g.out_channels]);
    let mut dx = want_input.then(|| vec![R::zero(); input.len()]);
    let mut cols = Vec::with_capacity(one.rows() * one.patch());
    let mut dcols = if want_input {
        vec![R::zero(); one.rows() * one.patch()]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let go = &grad_out[b * per_out..(b + 1) * per_out];
        if let Some(dk) = dk.as_mut() {
            im2col_into(&input[b * per_in..(b + 1) * per_in], &one, &mut cols);
            R::gemm(one.patch(), one.rows(), g.out_channels, &cols, true, go, false, dk, b > 0);
        }
        if let Some(dx) = dx.as_mut() {
            R::gemm(one.rows(), g.out_channels, one.patch(), go, false, kernel, true, &mut dcols, false);
            col2im(&dcols, &one, &mut dx[b * per_in..(b + 1) * per_in]);
        }
    }
    (dk, dx)
}

/// Per-channel sums of a `[rows, channels]` buffer, accumulated in f64.
pub fn channel_sums<R: Real>(data: &[R], channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; channels];
    for row in data.chunks_exact(channels) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    sums
}

/// Per-channel sums of `a * b` over two `[rows, channels]` buffers.
pub fn channel_dot<R: Real>(a: &[R], b: &[R], channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; channels];
    for (ra, rb) in a.chunks_exact(channels).zip(b.chunks_exact(channels)) {
        for ((s, x), y) in sums.iter_mut().zip(ra).zip(rb) {
            *s += x.as_f64() * y.as_f64();
        }
    }
    sums
}

/// Batch statistics of a `[rows, channels]` buffer: (mean, biased variance).
pub fn channel_moments<R: Real>(data: &[R], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / channels) as f64;
    let mean: Vec<f64> = channel_sums(data, channels).into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0f64; channels];
    for row in data.chunks_exact(channels) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// `data[r, c] * scale[c] + shift[c]`, computed in the tensor's precision.
pub fn channel_affine<R: Real>(data: &[R], scale: &[f64], shift: &[f64]) -> Vec<R> {
    let a: Vec<R> = scale.iter().map(|&v| R::of(v)).collect();
    let b: Vec<R> = shift.iter().map(|&v| R::of(v)).collect();
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(a.len()) {
        for ((v, a), b) in row.iter_mut().zip(&a).zip(&b) {
            *v = *v * *a + *b;
        }
    }
    out
}

/// Gradient of batch normalisation (train mode) with respect to its input.
///
/// `xhat` is the normalised input, `scale[c] = gamma[c] / sqrt(var[c] + eps)`.
pub fn batch_norm_input_grad<R: Real>(
    grad_out: &[R],
    xhat: &[R],
    scale: &[f64],
    channels: usize,
) -> Vec<R> {
    let n = (grad_out.len() / channels) as f64;
    let sum_g = channel_sums(grad_out, channels);
    let sum_gx = channel_dot(grad_out, xhat, channels);
    // scale * (g - mean(g) - xhat * mean(g * xhat)), regrouped per channel.
    let a: Vec<R> = scale.iter().map(|&s| R::of(s)).collect();
    let bx: Vec<R> = (0..channels).map(|c| R::of(-scale[c] * sum_gx[c] / n)).collect();
    let c0: Vec<R> = (0..channels).map(|c| R::of(-scale[c] * sum_g[c] / n)).collect();
    let mut out = grad_out.to_vec();
    for (row, xrow) in out.chunks_exact_mut(channels).zip(xhat.chunks_exact(channels)) {
        for ((((v, x), a), b), c) in row.iter_mut().zip(xrow).zip(&a).zip(&bx).zip(&c0) {
            *v = *v * *a + *x * *b + *c;
        }
    }
    out
}

/// Non-overlapping `pool × pool` max pooling. Returns values and the flat
/// input index each output was taken from; ties resolve to the first index
/// in row-major scan order.
pub fn max_pool_forward<R: Real>(
    input: &[R],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    pool: usize,
) -> (Vec<R>, Vec<usize>) {
    let (oh, ow) = (height / pool, width / pool);
    let mut values = Vec::with_capacity(batch * oh * ow * channels);
    let mut argmax = Vec::with_capacity(values.capacity());
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..channels {
                    let mut best = usize::MAX;
                    let mut best_v = R::neg_infinity();
                    for dy in 0..pool {
                        for dx in 0..pool {
                            let idx = ((b * height + oy * pool + dy) * width + ox * pool + dx) * channels + c;
                            if best == usize::MAX || input[idx] > best_v {
                                best = idx;
                                best_v = input[idx];
                            }
                        }
                    }
                    values.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    (values, argmax)
}

/// Mean softmax cross-entropy over rows of `logits` (`rows × classes`).
/// Returns the loss and the row-wise softmax probabilities.
pub fn softmax_xent<R: Real>(logits: &[R], targets: &[usize], classes: usize) -> (f64, Vec<R>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    for (row, &t) in logits.chunks_exact(classes).zip(targets) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t].as_f64();
        probs.extend(row.iter().map(|v| R::of((v.as_f64() - log_z).exp())));
    }
    (total / targets.len() as f64, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeometry {
            batch: 2,
            height: 4,
            width: 3,
            in_channels: 2,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
        };
        let x: Vec<f64> = (0..g.batch * 12 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.patch()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; g.rows() * g.patch()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn max_pool_picks_largest() {
        let (v, idx) = max_pool_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2, 1, 2);
        assert_eq!(v, vec![4.0]);
        assert_eq!(idx, vec![3]);
    }
}
