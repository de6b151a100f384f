//! Direct 2-D convolution over CHW buffers with hand-written backward passes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }
    pub fn ho(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn wo(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
    pub fn out_len(&self) -> usize {
        self.cout * self.ho() * self.wo()
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + kk - pad` falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let pad = self.pad();
        let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(self.stride) };
        let max_in = extent + pad - 1; // o * stride + kk <= extent - 1 + pad
        let hi = if max_in < kk { 0 } else { ((max_in - kk) / self.stride + 1).min(out_extent) };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward(s: &ConvShape, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let (ho, wo, pad) = (s.ho(), s.wo(), s.pad());
    let plane_in = s.h * s.w;
    let plane_out = ho * wo;
    for co in 0..s.cout {
        let o = &mut out[co * plane_out..(co + 1) * plane_out];
        o.fill(bias[co]);
        for ci in 0..s.cin {
            let ip = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..s.k {
                let (oy_lo, oy_hi) = s.valid_range(ky, s.h, ho);
                for kx in 0..s.k {
                    let wv = weights[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                    let (ox_lo, ox_hi) = s.valid_range(kx, s.w, wo);
                    let x0 = ox_lo * s.stride + kx - pad;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s.stride + ky - pad;
                        let row = &ip[iy * s.w + x0..(iy + 1) * s.w];
                        let orow = &mut o[oy * wo + ox_lo..oy * wo + ox_hi];
                        if s.stride == 1 {
                            for (a, &x) in orow.iter_mut().zip(row) {
                                *a += wv * x;
                            }
                        } else {
                            for (a, &x) in orow.iter_mut().zip(row.iter().step_by(s.stride)) {
                                *a += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for a convolution given the upstream gradient.
/// `grad_weights`/`grad_bias` and `grad_input` are each optional.
pub(crate) fn conv_backward(
    s: &ConvShape,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    mut grad_weights: Option<(&mut [f64], &mut [f64])>,
    mut grad_input: Option<&mut [f64]>,
) {
    let (ho, wo, pad) = (s.ho(), s.wo(), s.pad());
    let plane_in = s.h * s.w;
    let plane_out = ho * wo;
    for co in 0..s.cout {
        let go = &grad_out[co * plane_out..(co + 1) * plane_out];
        if let Some((_, gb)) = grad_weights.as_mut() {
            gb[co] += go.iter().sum::<f64>();
        }
        for ci in 0..s.cin {
            let ip = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..s.k {
                let (oy_lo, oy_hi) = s.valid_range(ky, s.h, ho);
                for kx in 0..s.k {
                    let widx = ((co * s.cin + ci) * s.k + ky) * s.k + kx;
                    let wv = weights[widx];
                    let (ox_lo, ox_hi) = s.valid_range(kx, s.w, wo);
                    let x0 = ox_lo * s.stride + kx - pad;
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s.stride + ky - pad;
                        let grow = &go[oy * wo + ox_lo..oy * wo + ox_hi];
                        let row = &ip[iy * s.w + x0..(iy + 1) * s.w];
                        if grad_weights.is_some() {
                            for (&g, &x) in grow.iter().zip(row.iter().step_by(s.stride)) {
                                acc += g * x;
                            }
                        }
                        if let Some(gi) = grad_input.as_mut() {
                            let gi_row = &mut gi[ci * plane_in + iy * s.w + x0..ci * plane_in + (iy + 1) * s.w];
                            if s.stride == 1 {
                                for (a, &g) in gi_row.iter_mut().zip(grow) {
                                    *a += wv * g;
                                }
                            } else {
                                for (a, &g) in gi_row.iter_mut().step_by(s.stride).zip(grow) {
                                    *a += wv * g;
                                }
                            }
                        }
                    }
                    if let Some((gw, _)) = grad_weights.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Hidden-layer nonlinearity (tanh). Bounded activations keep the box
/// outputs from drifting into saturation while objectness sharpens.
pub(crate) fn act_forward(pre: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(pre) {
        *o = x.tanh();
    }
}

/// Multiplies `grad` in place by the activation derivative at `pre`.
pub(crate) fn act_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        let t = x.tanh();
        *g *= 1.0 - t * t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference convolution with explicit bounds checks.
    fn naive(s: &ConvShape, input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = (s.ho(), s.wo());
        let mut out = vec![0.0; s.out_len()];
        for co in 0..s.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..s.cin {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * s.stride + ky) as isize - s.pad() as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad() as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += weights[((co * s.cin + ci) * s.k + ky) * s.k + kx]
                                    * input[ci * s.h * s.w + iy as usize * s.w + ix as usize];
                            }
                        }
                    }
                    out[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride, h) in [(5, 2, 12), (3, 2, 8), (3, 1, 7), (5, 1, 6), (1, 1, 4)] {
            let s = ConvShape { cin: 2, cout: 3, k, stride, h, w: h + 2 };
            let input: Vec<f64> = (0..s.cin * s.h * s.w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wts: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..s.cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; s.out_len()];
            conv_forward(&s, &input, &wts, &bias, &mut out);
            let want = naive(&s, &input, &wts, &bias);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <g, conv(x)> is linear in x and w, so its gradients must equal the
        // finite differences exactly up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { cin: 2, cout: 2, k: 3, stride: 2, h: 6, w: 6 };
        let input: Vec<f64> = (0..s.cin * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wts: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.3, -0.2];
        let g: Vec<f64> = (0..s.out_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64], w: &[f64]| {
            let mut o = vec![0.0; s.out_len()];
            conv_forward(&s, x, w, &bias, &mut o);
            o.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gw = vec![0.0; s.weight_len()];
        let mut gb = vec![0.0; s.cout];
        let mut gi = vec![0.0; input.len()];
        conv_backward(&s, &input, &wts, &g, Some((&mut gw, &mut gb)), Some(&mut gi));
        let h = 1e-6;
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += h;
            let mut m = input.clone();
            m[i] -= h;
            assert!(((f(&p, &wts) - f(&m, &wts)) / (2.0 * h) - gi[i]).abs() < 1e-7);
        }
        for i in 0..wts.len() {
            let mut p = wts.clone();
            p[i] += h;
            let mut m = wts.clone();
            m[i] -= h;
            assert!(((f(&input, &p) - f(&input, &m)) / (2.0 * h) - gw[i]).abs() < 1e-7);
        }
        for co in 0..s.cout {
            let plane = s.ho() * s.wo();
            let want: f64 = g[co * plane..(co + 1) * plane].iter().sum();
            assert!((gb[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
    }
}
