//! Grad-CAM saliency maps and PGM/PPM emission.

use std::io::Write;
use std::path::Path;

use crate::backbone::Network;
use crate::error::{Error, Result};
use crate::module::{Context, Mode, Module};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// A class-activation map normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values.
    pub values: Vec<f64>,
    pub source_layer: String,
    pub class_index: usize,
    /// Bilinear upsampling to the input resolution: (H, W, values).
    pub upsampled: Option<(usize, usize, Vec<f64>)>,
}

impl Heatmap {
    /// The map to render: upsampled if available.
    pub fn pixels(&self) -> (usize, usize, &[f64]) {
        match &self.upsampled {
            Some((h, w, v)) => (*h, *w, v),
            None => (self.height, self.width, &self.values),
        }
    }
}

/// Per-channel weights `α_c` used by Grad-CAM: the spatial mean of
/// d(logit_class)/d(activation_c).
#[derive(Clone, Debug)]
pub struct CamInternals<T> {
    pub activation: Tensor4<T>,
    pub gradient: Tensor4<T>,
    pub alphas: Vec<T>,
}

/// Forward/backward pass collecting the activation of `layer` and its gradient.
pub fn cam_internals<T: Scalar>(net: &Network<T>, x: &Tensor4<T>, class_index: usize, layer: &str) -> Result<CamInternals<T>> {
    if x.shape().n() != 1 {
        return Err(Error::Contract(format!("gradcam takes a single image, got batch {}", x.shape())));
    }
    if class_index >= net.spec.num_classes {
        return Err(Error::Contract(format!(
            "class index {class_index} out of range for {} classes",
            net.spec.num_classes
        )));
    }
    if !net.layer_names().iter().any(|n| n == layer) {
        return Err(Error::Lookup(layer.to_string()));
    }
    let mut ctx = Context::new(Mode::Eval);
    let input = ctx.tape.variable(x.clone());
    let logits = net.forward(&mut ctx, input)?;
    let act = ctx.activation(layer).ok_or_else(|| Error::Lookup(layer.to_string()))?;
    let k = net.spec.num_classes;
    let onehot = Tensor4::from_fn(Shape::new(1, k, 1, 1), |_, c, _, _| if c == class_index { T::one() } else { T::zero() });
    let sel = ctx.tape.constant(onehot);
    let picked = ctx.tape.mul(logits, sel)?;
    let root = ctx.tape.sum(picked)?;
    let grads = ctx.tape.backward(root)?;
    let activation = ctx.tape.tensor(act);
    let gradient = Tensor4::from_vec(activation.shape(), grads.wrt(&ctx.tape, act))?;
    let hw = activation.shape().h() * activation.shape().w();
    let inv = T::one() / T::from_usize_lossy(hw);
    let alphas = gradient.data().chunks_exact(hw).map(|g| g.iter().copied().sum::<T>() * inv).collect();
    Ok(CamInternals { activation, gradient, alphas })
}

/// `relu(Σ_c α_c · A_c)` divided by its maximum (an all-zero map stays zero).
pub fn gradcam<T: Scalar>(
    net: &Network<T>,
    x: &Tensor4<T>,
    class_index: usize,
    layer: &str,
    upsample: bool,
) -> Result<Heatmap> {
    let CamInternals { activation, alphas, .. } = cam_internals(net, x, class_index, layer)?;
    let [_, c, h, w] = activation.shape().0;
    let mut cam = vec![0.0f64; h * w];
    for ci in 0..c {
        let a = alphas[ci].to_f64_lossy();
        let plane = &activation.data()[ci * h * w..(ci + 1) * h * w];
        for (m, &v) in cam.iter_mut().zip(plane) {
            *m += a * v.to_f64_lossy();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    let upsampled = upsample.then(|| {
        let (oh, ow) = (x.shape().h(), x.shape().w());
        (oh, ow, bilinear(&cam, h, w, oh, ow))
    });
    Ok(Heatmap { height: h, width: w, values: cam, source_layer: layer.to_string(), class_index, upsampled })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, len: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// `round_half_up(255 · v)` for v in [0, 1].
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn pgm_bytes(h: &Heatmap) -> Vec<u8> {
    let (rows, cols, px) = h.pixels();
    let mut out = format!("P5 {cols} {rows} 255\n").into_bytes();
    out.extend(px.iter().map(|&v| to_byte(v)));
    out
}

/// Red-channel overlay of the heatmap on a grayscale image, 50/50 blend.
pub fn ppm_overlay_bytes(h: &Heatmap, gray: &[f64]) -> Result<Vec<u8>> {
    let (rows, cols, px) = h.pixels();
    if gray.len() != px.len() {
        return Err(Error::Dimension(format!(
            "overlay base has {} pixels, heatmap has {}",
            gray.len(),
            px.len()
        )));
    }
    let mut out = format!("P6 {cols} {rows} 255\n").into_bytes();
    for (&m, &g) in px.iter().zip(gray) {
        let base = 0.5 * g.clamp(0.0, 1.0);
        out.extend([to_byte(base + 0.5 * m), to_byte(base), to_byte(base)]);
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn emit_pgm(h: &Heatmap, path: &Path) -> Result<()> {
    write_file(path, &pgm_bytes(h))
}

pub fn emit_ppm_overlay(h: &Heatmap, gray: &[f64], path: &Path) -> Result<()> {
    write_file(path, &ppm_overlay_bytes(h, gray)?)
}

/// Parses a binary PGM written by [`emit_pgm`]: (width, height, pixels).
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format { offset: 0, message: format!("pgm: {m}") };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("no header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header not ascii"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [magic, w, h, maxval] = fields[..] else { return Err(bad("expected `P5 W H 255`")) };
    if magic != "P5" || maxval != "255" {
        return Err(bad("expected `P5 W H 255`"));
    }
    let w: usize = w.parse().map_err(|_| bad("width"))?;
    let h: usize = h.parse().map_err(|_| bad("height"))?;
    let px = &bytes[nl + 1..];
    if px.len() != w * h {
        return Err(Error::Format {
            offset: (nl + 1 + px.len()) as u64,
            message: format!("pgm: {} pixel bytes for {w}x{h}", px.len()),
        });
    }
    Ok((w, h, px.to_vec()))
}

/// Channel mean of a (1, C, H, W) image, min-max scaled to [0, 1].
pub fn grayscale<T: Scalar>(x: &Tensor4<T>) -> Vec<f64> {
    let [_, c, h, w] = x.shape().0;
    let mut g = vec![0.0; h * w];
    for ci in 0..c {
        for (i, v) in g.iter_mut().enumerate() {
            *v += x.data()[ci * h * w + i].to_f64_lossy() / c as f64;
        }
    }
    let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        g.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    g
}
