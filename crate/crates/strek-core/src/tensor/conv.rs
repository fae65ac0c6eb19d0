//! 2-D cross-correlation forward/backward over channel-major `[C, H, W]` data.
//!
//! Each of the k*k kernel taps contributes one GEMM over a zero-padded
//! buffer whose rows are long enough that the pixel axis stays contiguous.
//! The same structure drives the two backward products (input and kernel
//! gradients), so every heavy loop lands in `gemm.rs`.

use super::gemm::{gemm_abt_acc, gemm_acc};

pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, padding: usize) -> Self {
        let h_out = h + 2 * padding + 1 - k;
        let w_out = w + 2 * padding + 1 - k;
        ConvDims {
            c_in,
            h,
            w,
            c_out,
            k,
            padding,
            h_out,
            w_out,
        }
    }

    fn hp(&self) -> usize {
        self.h + 2 * self.padding
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.padding
    }

    /// Pixels the tap GEMMs run over: every padded position whose full
    /// kernel window stays inside the padded buffer.
    fn span(&self) -> usize {
        self.hp() * self.wp() - (self.k - 1) * self.wp() - (self.k - 1)
    }
}

fn pad_input(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let (hp, wp, p) = (d.hp(), d.wp(), d.padding);
    if p == 0 {
        return input.to_vec();
    }
    let mut out = vec![0.0; d.c_in * hp * wp];
    for c in 0..d.c_in {
        for r in 0..d.h {
            let src = (c * d.h + r) * d.w;
            let dst = c * hp * wp + (r + p) * wp + p;
            out[dst..dst + d.w].copy_from_slice(&input[src..src + d.w]);
        }
    }
    out
}

/// Pack one k*k tap of the kernel as a dense `[c_out x c_in]` matrix.
fn pack_tap(kernel: &[f64], d: &ConvDims, dy: usize, dx: usize, transpose: bool) -> Vec<f64> {
    let kk = d.k * d.k;
    let tap = dy * d.k + dx;
    let mut out = vec![0.0; d.c_out * d.c_in];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let v = kernel[(co * d.c_in + ci) * kk + tap];
            if transpose {
                out[ci * d.c_out + co] = v;
            } else {
                out[co * d.c_in + ci] = v;
            }
        }
    }
    out
}

/// Forward cross-correlation: returns `[c_out, h_out, w_out]`.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let (hp, wp) = (d.hp(), d.wp());
    let plane = hp * wp;
    let span = d.span();
    let padded = pad_input(input, d);
    let mut scratch = vec![0.0; d.c_out * plane];
    for dy in 0..d.k {
        for dx in 0..d.k {
            let a = pack_tap(kernel, d, dy, dx, false);
            let off = dy * wp + dx;
            gemm_acc(
                d.c_out,
                d.c_in,
                span,
                &a,
                d.c_in,
                &padded[off..],
                plane,
                &mut scratch,
                plane,
            );
        }
    }
    let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
    for co in 0..d.c_out {
        for y in 0..d.h_out {
            let src = co * plane + y * wp;
            let dst = (co * d.h_out + y) * d.w_out;
            out[dst..dst + d.w_out].copy_from_slice(&scratch[src..src + d.w_out]);
        }
    }
    out
}

/// Gradients w.r.t. input and kernel given the output gradient.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let (hp, wp, p) = (d.hp(), d.wp(), d.padding);
    let plane = hp * wp;
    let span = d.span();
    let padded = pad_input(input, d);

    // Output gradient embedded at the tap-GEMM positions; everything the
    // forward pass never exposed stays zero.
    let mut gout_pad = vec![0.0; d.c_out * plane];
    for co in 0..d.c_out {
        for y in 0..d.h_out {
            let src = (co * d.h_out + y) * d.w_out;
            let dst = co * plane + y * wp;
            gout_pad[dst..dst + d.w_out].copy_from_slice(&grad_out[src..src + d.w_out]);
        }
    }

    let mut gin_pad = vec![0.0; d.c_in * plane];
    let kk = d.k * d.k;
    let mut grad_kernel = vec![0.0; d.c_out * d.c_in * kk];
    for dy in 0..d.k {
        for dx in 0..d.k {
            let off = dy * wp + dx;
            // d input[q + off] accumulates kernel^T * d out[q]
            let at = pack_tap(kernel, d, dy, dx, true);
            gemm_acc(
                d.c_in,
                d.c_out,
                span,
                &at,
                d.c_out,
                &gout_pad,
                plane,
                &mut gin_pad[off..],
                plane,
            );
            // d kernel[tap] = d out * shifted input^T
            let mut tap_grad = vec![0.0; d.c_out * d.c_in];
            gemm_abt_acc(
                d.c_out,
                span,
                d.c_in,
                &gout_pad,
                plane,
                &padded[off..],
                plane,
                &mut tap_grad,
                d.c_in,
            );
            let tap = dy * d.k + dx;
            for co in 0..d.c_out {
                for ci in 0..d.c_in {
                    grad_kernel[(co * d.c_in + ci) * kk + tap] = tap_grad[co * d.c_in + ci];
                }
            }
        }
    }

    let mut grad_input = vec![0.0; d.c_in * d.h * d.w];
    for ci in 0..d.c_in {
        for r in 0..d.h {
            let src = ci * plane + (r + p) * wp + p;
            let dst = (ci * d.h + r) * d.w;
            grad_input[dst..dst + d.w].copy_from_slice(&gin_pad[src..src + d.w]);
        }
    }
    (grad_input, grad_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
        let p = d.padding as isize;
        for co in 0..d.c_out {
            for y in 0..d.h_out {
                for x in 0..d.w_out {
                    let mut acc = 0.0;
                    for ci in 0..d.c_in {
                        for dy in 0..d.k {
                            for dx in 0..d.k {
                                let iy = y as isize + dy as isize - p;
                                let ix = x as isize + dx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                                    acc += input[(ci * d.h + iy as usize) * d.w + ix as usize]
                                        * kernel[((co * d.c_in + ci) * d.k + dy) * d.k + dx];
                                }
                            }
                        }
                    }
                    out[(co * d.h_out + y) * d.w_out + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(ci, h, w, co, k, p) in &[
            (1usize, 6usize, 6usize, 1usize, 3usize, 1usize),
            (3, 9, 7, 4, 5, 2),
            (2, 8, 8, 3, 3, 0),
            (4, 5, 5, 2, 1, 0),
        ] {
            let d = ConvDims::new(ci, h, w, co, k, p);
            let input: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernel: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&input, &kernel, &d);
            let slow = naive_conv(&input, &kernel, &d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_kernel_scales_the_input() {
        // all-ones 1x3x3 input, 1x1x1x1 kernel of value 2 -> 3x3 output of 2s
        let d = ConvDims::new(1, 3, 3, 1, 1, 0);
        let out = conv2d_forward(&[1.0; 9], &[2.0], &d);
        assert_eq!(out, vec![2.0; 9]);
    }

    #[test]
    fn impulse_input_reproduces_flipped_kernel() {
        // A centered delta under cross-correlation returns the kernel
        // flipped in both axes around the delta location.
        let k = 3;
        let d = ConvDims::new(1, 5, 5, 1, k, k / 2);
        let mut input = vec![0.0; 25];
        input[2 * 5 + 2] = 1.0;
        let kernel: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let out = conv2d_forward(&input, &kernel, &d);
        for dy in 0..k {
            for dx in 0..k {
                let oy = 2 + 1 - dy;
                let ox = 2 + 1 - dx;
                assert_eq!(out[oy * 5 + ox], kernel[dy * k + dx]);
            }
        }
    }
}
