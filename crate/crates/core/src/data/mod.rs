//! Manifest loading, ΔB_max labelling, LED-grouped splits, augmentation and
//! a synthetic corpus generator.

mod augment;
mod synth;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, bilinear_resize, AugmentParams, CROP_SIZE};
pub use synth::{synth_generate, write_corpus, SynthCorpus};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
/// Thermal-shock cycle counts at which every LED is imaged.
pub const TSC_POINTS: [u32; 5] = [0, 100, 500, 1000, 1500];
/// ΔB_max above this is defective.
pub const DEFECT_THRESHOLD: f64 = 0.20;

/// One row of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub led_id: String,
    pub led_type: String,
    pub tsc: u32,
    pub b_max: f64,
}

/// Thermal measurement summary of one LED at one cycle count.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaRecord {
    pub led_id: String,
    pub tsc: u32,
    pub b_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[64, 64, 1]`, values in [0, 1].
    pub image: Tensor<f32>,
    pub delta_b_max: f64,
    pub b_max: f64,
    pub led_id: String,
    pub led_type: String,
    pub tsc: u32,
    pub image_path: Option<PathBuf>,
    /// Ground-truth crack pixels, row-major 64×64, when available.
    pub crack_mask: Option<Vec<bool>>,
}

impl AsRef<Tensor<f32>> for LabeledSample {
    fn as_ref(&self) -> &Tensor<f32> {
        &self.image
    }
}

impl LabeledSample {
    pub fn is_defective(&self) -> bool {
        self.delta_b_max > DEFECT_THRESHOLD
    }

    pub fn crack_pixels(&self) -> usize {
        self.crack_mask.as_ref().map_or(0, |m| m.iter().filter(|&&c| c).count())
    }
}

/// ΔB_max(t) = B_max(t) / B_max(0) − 1.
pub fn compute_label(led_id: &str, b_max_t: f64, b_max_0: f64) -> Result<f64> {
    if !(b_max_0 > 0.0) || !b_max_0.is_finite() {
        return Err(Error::Data(format!("LED {led_id}: baseline B_max {b_max_0} is not positive")));
    }
    if !(b_max_t > 0.0) || !b_max_t.is_finite() {
        return Err(Error::Data(format!("LED {led_id}: B_max {b_max_t} is not positive")));
    }
    // Same quantity as the ratio minus one, with a single rounding.
    Ok((b_max_t - b_max_0) / b_max_0)
}

/// Decodes an 8-bit grayscale PNG/PGM into `[64, 64, 1]` scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    let img = img.to_luma8();
    if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
        return Err(Error::Data(format!(
            "image {} is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, 1], data)?)
}

fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let m = load_image(path)?;
    Ok(m.data().iter().map(|&v| v > 0.5).collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let rows: std::result::Result<Vec<ManifestRow>, _> = rdr.deserialize().collect();
    rows.map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels every manifest row against its LED's `tsc = 0` row.
pub fn label_rows(rows: &[ManifestRow]) -> Result<Vec<f64>> {
    let mut baseline: HashMap<&str, f64> = HashMap::new();
    let mut seen = HashSet::new();
    for r in rows {
        if !seen.insert((r.led_id.as_str(), r.tsc)) {
            return Err(Error::Data(format!("LED {}: duplicate row for tsc {}", r.led_id, r.tsc)));
        }
        if r.tsc == 0 {
            baseline.insert(&r.led_id, r.b_max);
        }
    }
    rows.iter()
        .map(|r| {
            let b0 = baseline
                .get(r.led_id.as_str())
                .ok_or_else(|| Error::Data(format!("LED {}: no tsc=0 baseline row", r.led_id)))?;
            compute_label(&r.led_id, r.b_max, *b0)
        })
        .collect()
}

/// Reads the manifest and every referenced image (paths relative to `root`).
///
/// A crack mask is attached when `root/masks/<image_path>` exists.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<LabeledSample>> {
    let rows = read_manifest(manifest)?;
    let labels = label_rows(&rows)?;
    rows.into_iter()
        .zip(labels)
        .map(|(r, delta)| {
            let path = root.join(&r.image_path);
            let image = load_image(&path)?;
            let mask_path = root.join("masks").join(&r.image_path);
            let crack_mask = if mask_path.is_file() { Some(load_mask(&mask_path)?) } else { None };
            Ok(LabeledSample {
                image,
                delta_b_max: delta,
                b_max: r.b_max,
                led_id: r.led_id,
                led_type: r.led_type,
                tsc: r.tsc,
                image_path: Some(path),
                crack_mask,
            })
        })
        .collect()
}

/// Sample indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn select<'a, S>(&self, samples: &'a [S], ids: &[usize]) -> Vec<&'a S> {
        ids.iter().map(|&i| &samples[i]).collect()
    }
}

/// 60/20/20 split over LEDs, so all images of one LED share a split.
pub fn split_dataset(samples: &[LabeledSample], seed: u64) -> Result<SplitManifest> {
    let mut leds: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for s in samples {
        if seen.insert(s.led_id.as_str()) {
            leds.push(&s.led_id);
        }
    }
    if leds.len() < 5 {
        return Err(Error::Data(format!("need at least 5 LEDs to split, found {}", leds.len())));
    }
    leds.sort_unstable();
    leds.shuffle(&mut rng::stream(seed, "split", 0));
    let l = leds.len() as f64;
    let n_train = (0.6 * l).round() as usize;
    let n_val = (0.2 * l).round() as usize;
    let which: HashMap<&str, usize> = leds
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 }))
        .collect();
    let mut m = SplitManifest { train: Vec::new(), val: Vec::new(), test: Vec::new(), seed };
    for (i, s) in samples.iter().enumerate() {
        match which[s.led_id.as_str()] {
            0 => m.train.push(i),
            1 => m.val.push(i),
            _ => m.test.push(i),
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        assert_eq!(compute_label("a", 1.0, 1.0).unwrap(), 0.0);
        assert!((compute_label("a", 1.99, 1.0).unwrap() - 0.99).abs() < 1e-12);
        assert!((compute_label("a", 1.03, 1.0).unwrap() - 0.03).abs() < 1e-12);
        let e = compute_label("LED-7", 1.0, 0.0).unwrap_err().to_string();
        assert!(e.contains("LED-7"), "{e}");
    }

    #[test]
    fn missing_baseline_names_led() {
        let rows = vec![ManifestRow {
            image_path: "x.png".into(),
            led_id: "L42".into(),
            led_type: "A".into(),
            tsc: 100,
            b_max: 1.2,
        }];
        let e = label_rows(&rows).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
        assert!(e.to_string().contains("L42"));
    }
}
