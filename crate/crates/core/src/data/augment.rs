use rand::Rng;

use crate::tensor::Tensor;

/// Side of the square crop taken before resizing back to full size.
pub const CROP_SIZE: usize = 56;

/// One draw of the training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub top: usize,
    pub left: usize,
}

impl AugmentParams {
    pub fn identity_crop(size: usize) -> Self {
        let off = (size - CROP_SIZE) / 2;
        AugmentParams { hflip: false, vflip: false, top: off, left: off }
    }

    pub fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let top = rng.random_range(0..=size - CROP_SIZE);
        let left = rng.random_range(0..=size - CROP_SIZE);
        AugmentParams { hflip, vflip, top, left }
    }
}

/// Random horizontal/vertical flips, then a 56×56 crop resized back bilinearly.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let p = AugmentParams::sample(image.shape()[0], rng);
    augment_with(image, p)
}

pub fn augment_with(image: &Tensor<f32>, p: AugmentParams) -> Tensor<f32> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let crop = Tensor::from_fn(&[CROP_SIZE, CROP_SIZE, c], |i| {
        let (y, x, ch) = (i / (CROP_SIZE * c), (i / c) % CROP_SIZE, i % c);
        let (mut sy, mut sx) = (y + p.top, x + p.left);
        if p.vflip {
            sy = h - 1 - sy;
        }
        if p.hflip {
            sx = w - 1 - sx;
        }
        src[(sy * w + sx) * c + ch]
    });
    bilinear_resize(&crop, h, w)
}

/// Bilinear resampling with half-pixel centres (edges clamped).
pub fn bilinear_resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out).expect("resize shape")
}
