use std::time::Instant;

use super::conv::{act_backward, act_forward, conv_backward, conv_forward, ConvShape};
use super::{ArchConfig, DetectorParams, Image, RawPrediction, NUM_SCALES};
use crate::error::{LabError, Result};

/// Any scalar function of the raw head outputs with an analytic gradient.
pub trait RawObjective: Sync {
    fn evaluate(&self, arch: &ArchConfig, raw: &RawPrediction) -> (f64, Vec<f64>);
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: [Vec<f64>; 3],
    act: [Vec<f64>; 3],
}

fn check_image(arch: &ArchConfig, image: &Image) -> Result<()> {
    if image.height != arch.image_size || image.width != arch.image_size || image.data.len() != image.height * image.width * 3
    {
        return Err(LabError::Shape {
            expected: format!("{0}x{0}x3", arch.image_size),
            got: format!("{}x{}x3 ({} values)", image.height, image.width, image.data.len()),
        });
    }
    Ok(())
}

pub fn forward(params: &DetectorParams, image: &Image) -> Result<RawPrediction> {
    forward_cached(params, image).map(|(raw, _)| raw)
}

pub fn forward_cached(params: &DetectorParams, image: &Image) -> Result<(RawPrediction, ForwardCache)> {
    let arch = &params.arch;
    check_image(arch, image)?;
    let input = image.to_chw();
    let shapes = arch.layer_shapes();
    let mut pre: [Vec<f64>; 3] = Default::default();
    let mut act: [Vec<f64>; 3] = Default::default();
    for l in 0..3 {
        let s = shapes[l];
        let (w, b) = params.layer(l);
        let mut p = vec![0.0; s.out_len()];
        conv_forward(&s, if l == 0 { &input } else { &act[l - 1] }, w, b, &mut p);
        let mut a = vec![0.0; p.len()];
        act_forward(&p, &mut a);
        pre[l] = p;
        act[l] = a;
    }

    let mut raw = RawPrediction::zeros(arch);
    let ch = arch.cell_channels();
    for scale in 0..NUM_SCALES {
        let s = shapes[3 + scale];
        let (w, b) = params.layer(3 + scale);
        let mut out = vec![0.0; s.out_len()];
        conv_forward(&s, &head_input(arch, &act, scale), w, b, &mut out);
        let cells = s.h * s.w;
        let off = arch.scale_offset(scale);
        for cell in 0..cells {
            let dst = &mut raw.data[(off + cell) * ch..(off + cell + 1) * ch];
            for (c, d) in dst.iter_mut().enumerate() {
                *d = out[c * cells + cell];
            }
        }
    }
    Ok((raw, ForwardCache { input, pre, act }))
}

/// Input of the head at `scale`: that scale's backbone activation followed by
/// the next deeper activation upsampled 2x (nearest), as CHW planes.
fn head_input(arch: &ArchConfig, act: &[Vec<f64>; 3], scale: usize) -> Vec<f64> {
    let mut out = act[scale].clone();
    if scale + 1 < NUM_SCALES {
        let g = arch.grid(scale);
        let gd = g / 2;
        for plane in act[scale + 1].chunks_exact(gd * gd) {
            for y in 0..g {
                let row = &plane[(y / 2) * gd..(y / 2 + 1) * gd];
                out.extend((0..g).map(|x| row[x / 2]));
            }
        }
    }
    out
}

/// Back-propagates `grad_raw` (same layout as the raw prediction). Returns the
/// parameter gradient and/or the input gradient in HWC order.
pub fn backward(
    params: &DetectorParams,
    cache: &ForwardCache,
    grad_raw: &[f64],
    want_params: bool,
    want_input: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let arch = &params.arch;
    let offsets = arch.layer_offsets();
    let shapes = arch.layer_shapes();
    let mut gparams = want_params.then(|| vec![0.0; params.weights.len()]);
    let ch = arch.cell_channels();

    let mut gact: [Vec<f64>; 3] = [
        vec![0.0; cache.act[0].len()],
        vec![0.0; cache.act[1].len()],
        vec![0.0; cache.act[2].len()],
    ];
    for scale in 0..NUM_SCALES {
        let layer = 3 + scale;
        let s = shapes[layer];
        let cells = s.h * s.w;
        let off = arch.scale_offset(scale);
        let mut gout = vec![0.0; s.out_len()];
        let mut any = false;
        for cell in 0..cells {
            let src = &grad_raw[(off + cell) * ch..(off + cell + 1) * ch];
            for (c, &g) in src.iter().enumerate() {
                gout[c * cells + cell] = g;
                any |= g != 0.0;
            }
        }
        if !any {
            continue;
        }
        let (w, _) = params.layer(layer);
        let input = head_input(arch, &cache.act, scale);
        let mut gin = vec![0.0; input.len()];
        conv_backward(&s, &input, w, &gout, layer_grad(&mut gparams, offsets[layer], &s), Some(&mut gin));
        let own = cache.act[scale].len();
        for (a, g) in gact[scale].iter_mut().zip(&gin[..own]) {
            *a += g;
        }
        if scale + 1 < NUM_SCALES {
            let g = s.h;
            let deeper = &mut gact[scale + 1];
            for (c, plane) in gin[own..].chunks_exact(g * g).enumerate() {
                for y in 0..g {
                    for x in 0..g {
                        deeper[c * (g / 2) * (g / 2) + (y / 2) * (g / 2) + x / 2] += plane[y * g + x];
                    }
                }
            }
        }
    }

    let mut ginput = None;
    for l in (0..3).rev() {
        let s = shapes[l];
        let mut g = std::mem::take(&mut gact[l]);
        act_backward(&cache.pre[l], &mut g);
        let (w, _) = params.layer(l);
        let gw = layer_grad(&mut gparams, offsets[l], &s);
        if l > 0 {
            let (lo, _) = gact.split_at_mut(l);
            conv_backward(&s, &cache.act[l - 1], w, &g, gw, Some(&mut lo[l - 1]));
        } else if want_input {
            let mut gi = vec![0.0; cache.input.len()];
            conv_backward(&s, &cache.input, w, &g, gw, Some(&mut gi));
            ginput = Some(Image::chw_to_hwc(&gi, arch.image_size, arch.image_size));
        } else {
            conv_backward(&s, &cache.input, w, &g, gw, None);
        }
    }
    (gparams, ginput)
}

fn layer_grad<'a>(
    gparams: &'a mut Option<Vec<f64>>,
    (wo, bo): (usize, usize),
    s: &ConvShape,
) -> Option<(&'a mut [f64], &'a mut [f64])> {
    gparams.as_mut().map(|gp| {
        let (a, b) = gp.split_at_mut(bo);
        (&mut a[wo..wo + s.weight_len()], &mut b[..s.cout])
    })
}

/// Value of `objective` at `image` and its gradient w.r.t. the pixels (HWC).
pub fn grad_input(params: &DetectorParams, image: &Image, objective: &dyn RawObjective) -> Result<(f64, Vec<f64>)> {
    let (raw, cache) = forward_cached(params, image)?;
    let (value, graw) = objective.evaluate(&params.arch, &raw);
    let (_, gi) = backward(params, &cache, &graw, false, true);
    Ok((value, gi.expect("input gradient requested")))
}

/// Median wall-clock time of one forward pass, in nanoseconds.
pub fn profile_backbone(params: &DetectorParams, repeats: usize) -> Result<u64> {
    if repeats == 0 {
        return Err(LabError::Config("repeats must be positive".into()));
    }
    let image = Image::filled(params.arch.image_size, params.arch.image_size, 0.5);
    forward(params, &image)?;
    let mut times: Vec<u64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            let r = forward(params, &image);
            let dt = t.elapsed().as_nanos() as u64;
            std::hint::black_box(r).ok();
            dt
        })
        .collect();
    times.sort_unstable();
    Ok(times[times.len() / 2])
}
