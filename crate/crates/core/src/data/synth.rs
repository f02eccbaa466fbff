//! Procedural stand-in for acoustic micrographs of LED solder joints: dark
//! pads framed by bright boundaries, round voids, and bright cracks that grow
//! out of the voids with cycle count.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledSample, ManifestRow, IMAGE_SIZE, TSC_POINTS};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

const LED_TYPES: [&str; 3] = ["A", "B", "C"];
/// Fraction of each crack's full length present at each cycle count.
const GROWTH: [f64; 5] = [0.0, 0.15, 0.45, 0.75, 1.0];
const BACKGROUND: f64 = 0.45;
const BOUNDARY: f64 = 0.82;
const PAD: f64 = 0.22;
const VOID: f64 = 0.62;
const CRACK: f64 = 0.93;

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub samples: Vec<LabeledSample>,
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

impl Rect {
    fn contains(&self, y: isize, x: isize) -> bool {
        y >= self.y0 as isize && y < self.y1 as isize && x >= self.x0 as isize && x < self.x1 as isize
    }
}

fn pads<R: Rng>(kind: usize, rng: &mut R) -> Vec<Rect> {
    let mut j = |base: usize| (base as i64 + rng.random_range(-2i64..=2)) as usize;
    match kind {
        0 => vec![
            Rect { y0: j(8), x0: j(7), y1: j(56), x1: j(29) },
            Rect { y0: j(8), x0: j(35), y1: j(56), x1: j(57) },
        ],
        1 => vec![
            Rect { y0: j(7), x0: j(8), y1: j(29), x1: j(56) },
            Rect { y0: j(35), x0: j(8), y1: j(57), x1: j(56) },
        ],
        _ => vec![
            Rect { y0: j(7), x0: j(7), y1: j(57), x1: j(38) },
            Rect { y0: j(14), x0: j(44), y1: j(50), x1: j(57) },
        ],
    }
}

/// Pixel path of a crack: a persistent random walk that stays inside `pad`.
fn crack_path<R: Rng>(start: (f64, f64), pad: Rect, len: usize, rng: &mut R) -> Vec<usize> {
    let (mut y, mut x) = start;
    let mut theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut path: Vec<usize> = Vec::with_capacity(len);
    let inner = Rect { y0: pad.y0 + 1, x0: pad.x0 + 1, y1: pad.y1 - 1, x1: pad.x1 - 1 };
    let turn = Normal::new(0.0, 0.3).expect("valid sigma");
    let mut guard = 0;
    while path.len() < len && guard < len * 20 {
        guard += 1;
        theta += turn.sample(rng);
        let (ny, nx) = (y + theta.sin(), x + theta.cos());
        if !inner.contains(ny.round() as isize, nx.round() as isize) {
            theta += std::f64::consts::PI * rng.random_range(0.5..1.5);
            continue;
        }
        y = ny;
        x = nx;
        let p = ny.round() as usize * IMAGE_SIZE + nx.round() as usize;
        if path.last() != Some(&p) && !path.contains(&p) {
            path.push(p);
        }
    }
    path
}

/// Marks the 3×3 neighbourhood of pixel `p` that lies inside `pad`.
fn stamp(mask: &mut [bool], p: usize, pad: Rect) {
    let (y, x) = ((p / IMAGE_SIZE) as isize, (p % IMAGE_SIZE) as isize);
    for dy in -1..=1 {
        for dx in -1..=1 {
            if pad.contains(y + dy, x + dx) {
                mask[(y + dy) as usize * IMAGE_SIZE + (x + dx) as usize] = true;
            }
        }
    }
}

/// Generates `n_leds` LEDs × 5 cycle counts, deterministically per seed.
pub fn synth_generate(n_leds: usize, seed: u64) -> Result<SynthCorpus> {
    if n_leds < 5 {
        return Err(Error::Config(format!("synthetic corpus needs at least 5 LEDs, got {n_leds}")));
    }
    let mut samples = Vec::with_capacity(n_leds * TSC_POINTS.len());
    let mut rows = Vec::with_capacity(samples.capacity());
    let pixel_noise = Normal::new(0.0, 0.025).expect("valid sigma");
    let label_noise = Normal::new(0.0, 0.015).expect("valid sigma");
    for led in 0..n_leds {
        let mut rng = rng::stream(seed, "synth", led as u64);
        let kind = rng.random_range(0..LED_TYPES.len());
        let led_id = format!("LED{led:04}");
        let gain: f64 = rng.random_range(0.9..1.1);
        let offset: f64 = rng.random_range(-0.04..0.04);
        let pads = pads(kind, &mut rng);

        let mut base = vec![BACKGROUND; IMAGE_SIZE * IMAGE_SIZE];
        for r in &pads {
            for y in r.y0.saturating_sub(2)..(r.y1 + 2).min(IMAGE_SIZE) {
                for x in r.x0.saturating_sub(2)..(r.x1 + 2).min(IMAGE_SIZE) {
                    base[y * IMAGE_SIZE + x] = if r.contains(y as isize, x as isize) { PAD } else { BOUNDARY };
                }
            }
        }

        let severity: f64 = rng.random::<f64>().powf(1.3);
        let mut cracks = Vec::new();
        for r in &pads {
            let n_voids = rng.random_range(1..=3);
            let mut voids = Vec::new();
            for _ in 0..n_voids {
                let rad: f64 = rng.random_range(1.2..2.8);
                let cy = rng.random_range(r.y0 as f64 + 4.0..r.y1 as f64 - 4.0);
                let cx = rng.random_range(r.x0 as f64 + 4.0..r.x1 as f64 - 4.0);
                for y in r.y0..r.y1 {
                    for x in r.x0..r.x1 {
                        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad {
                            base[y * IMAGE_SIZE + x] = VOID;
                        }
                    }
                }
                voids.push((cy, cx));
            }
            let n_cracks = rng.random_range(1..=2);
            for c in 0..n_cracks {
                let len = (severity * rng.random_range(35.0..60.0)).round() as usize;
                cracks.push((crack_path(voids[c % voids.len()], *r, len, &mut rng), *r));
            }
        }

        let alpha: f64 = rng.random_range(0.8..1.2) / 300.0;
        let b0: f64 = rng.random_range(0.8..1.6);
        let mut prev = 0.0f64;
        for (t, &tsc) in TSC_POINTS.iter().enumerate() {
            let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
            for (path, pad) in &cracks {
                let k = (GROWTH[t] * path.len() as f64).round() as usize;
                for &p in &path[..k] {
                    stamp(&mut mask, p, *pad);
                }
            }
            let area = mask.iter().filter(|&&m| m).count();
            let delta = if tsc == 0 { 0.0 } else { (alpha * area as f64 + label_noise.sample(&mut rng)).max(prev) };
            prev = delta;
            let b_max = if tsc == 0 { b0 } else { b0 * (1.0 + delta) };

            let pixels: Vec<u8> = (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| {
                    let v = if mask[i] { CRACK } else { base[i] };
                    let v = v * gain + offset + pixel_noise.sample(&mut rng);
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
                .collect();
            let image = Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, 1], pixels.iter().map(|&v| v as f32 / 255.0).collect())?;
            let image_path = format!("images/{led_id}_{tsc:04}.png");
            let row = ManifestRow {
                image_path: image_path.clone(),
                led_id: led_id.clone(),
                led_type: LED_TYPES[kind].to_string(),
                tsc,
                b_max,
            };
            samples.push(LabeledSample {
                image,
                delta_b_max: super::compute_label(&led_id, b_max, b0)?,
                b_max,
                led_id: led_id.clone(),
                led_type: row.led_type.clone(),
                tsc,
                image_path: Some(image_path.into()),
                crack_mask: Some(mask),
            });
            rows.push(row);
        }
    }
    Ok(SynthCorpus { samples, rows })
}

fn to_gray(values: impl Iterator<Item = u8>) -> GrayImage {
    GrayImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, values.collect()).expect("64x64 buffer")
}

fn save(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `manifest.csv`, `images/` and `masks/images/` under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    for (s, r) in corpus.samples.iter().zip(&corpus.rows) {
        let img = to_gray(s.image.data().iter().map(|&v| (v * 255.0).round() as u8));
        save(&img, &dir.join(&r.image_path))?;
        if let Some(mask) = &s.crack_mask {
            save(&to_gray(mask.iter().map(|&m| if m { 255 } else { 0 })), &dir.join("masks").join(&r.image_path))?;
        }
    }
    super::write_manifest(&dir.join("manifest.csv"), &corpus.rows)
}
