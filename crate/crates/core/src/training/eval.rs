use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, DEFECT_THRESHOLD};
use crate::tensor::{Real, Tensor};
use crate::vit::VitRegressor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectClass {
    Defective,
    Functional,
}

impl DefectClass {
    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Defective => "defective",
            DefectClass::Functional => "functional",
        }
    }
}

/// Defective iff ΔB_max > 0.20 (strict).
pub fn classify_defect(delta: f64) -> DefectClass {
    if delta > DEFECT_THRESHOLD {
        DefectClass::Defective
    } else {
        DefectClass::Functional
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, label: f64, predicted: f64) {
        let truth = classify_defect(label) == DefectClass::Defective;
        let pred = classify_defect(predicted) == DefectClass::Defective;
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub led_id: String,
    pub tsc: u32,
    pub label: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mse: f64,
    pub predictions: Vec<SamplePrediction>,
    pub confusion: Confusion,
}

impl EvalReport {
    /// Builds the report from labels and predictions in sample order.
    pub fn from_predictions(split: &str, predictions: Vec<SamplePrediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        let mut confusion = Confusion::default();
        let mut sse = 0.0;
        for p in &predictions {
            sse += (p.predicted - p.label).powi(2);
            confusion.add(p.label, p.predicted);
        }
        let mse = sse / predictions.len() as f64;
        Ok(EvalReport { split: split.to_string(), mse, predictions, confusion })
    }

    pub fn tsv(&self) -> String {
        let mut s = String::from("led_id\ttsc\tlabel\tpredicted\n");
        for p in &self.predictions {
            s.push_str(&format!("{}\t{}\t{:.9}\t{:.9}\n", p.led_id, p.tsc, p.label, p.predicted));
        }
        s
    }
}

/// Batched predictions; batches are spread over `threads` scoped workers and
/// merged in input order, so the result does not depend on `threads`.
pub fn predict_many<T: Real, I: AsRef<Tensor<f32>> + Sync>(
    model: &VitRegressor<T>,
    images: &[I],
    batch_size: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    let batch_size = batch_size.max(1);
    let chunks: Vec<&[I]> = images.chunks(batch_size).collect();
    let run = |c: &[I]| {
        let refs: Vec<&Tensor<f32>> = c.iter().map(|i| i.as_ref()).collect();
        model.predict_batch(&refs)
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    let results: Vec<Result<Vec<f64>>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("prediction worker panicked")).collect()
        })
    };
    let mut out = Vec::with_capacity(images.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn predict<T: Real>(model: &VitRegressor<T>, image: &Tensor<f32>) -> Result<f64> {
    model.predict(image)
}

/// MSE and defect confusion counts over `samples`.
pub fn evaluate<T: Real>(model: &VitRegressor<T>, samples: &[&LabeledSample], split: &str, threads: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let preds = predict_many(model, samples, 64, threads)?;
    let rows = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| SamplePrediction { led_id: s.led_id.clone(), tsc: s.tsc, label: s.delta_b_max, predicted: p })
        .collect();
    EvalReport::from_predictions(split, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defect_threshold_is_strict() {
        assert_eq!(classify_defect(0.99), DefectClass::Defective);
        assert_eq!(classify_defect(0.18), DefectClass::Functional);
        assert_eq!(classify_defect(0.20), DefectClass::Functional);
    }
}
