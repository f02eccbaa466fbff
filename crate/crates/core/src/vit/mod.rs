//! Vision transformer backbone: patch geometry, embedding, transformer
//! blocks, parameter counting and the scalar regression model.

mod block;
mod config;
mod encoder;
mod head;
mod patch;
mod posembed;

pub use block::{NormSite, Taps, TransformerStack};
pub(crate) use block::{Linear, INIT_STD};
pub use config::{
    count_params, decoder_params, head_params, imagenet_param_count, linear_classifier_params, masked_count,
    ModelConfig, PatchGrid, VitSize,
};
pub use encoder::{patch_batch, TokenSequence, VitEncoder};
pub use head::RegressionHead;
pub use patch::{patchify, unpatchify};
pub use posembed::sincos_2d;

use crate::params::{Graph, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor, Var};
use crate::{Error, Result};

/// Encoder plus regression head, predicting one scalar per image.
#[derive(Debug, Clone)]
pub struct VitRegressor<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: VitEncoder,
    pub head: RegressionHead,
}

impl<T: Real> VitRegressor<T> {
    /// Fresh initialization; encoder and head draw from separate seed streams.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, config, &mut rng::stream(seed, "init.encoder", 0))?;
        let head = RegressionHead::new(&mut store, config.width, config.head_hidden, &mut rng::stream(seed, "init.head", 0));
        Ok(VitRegressor { config: config.clone(), store, encoder, head })
    }

    /// Fresh head on top of the encoder tensors found in `pretrained`.
    pub fn from_pretrained(config: &ModelConfig, pretrained: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        model.store.load_matching(pretrained, VitEncoder::PREFIX)?;
        Ok(model)
    }

    pub fn freeze_encoder(&mut self, frozen: bool) {
        self.store.set_frozen(VitEncoder::PREFIX, frozen);
    }

    /// Records the forward pass for a `[batch·N, P²C]` patch matrix and returns `[batch, 1]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, patches: Var, batch: usize, taps: &mut Taps) -> Result<Var> {
        let tokens = self.encoder.forward(g, patches, batch, taps)?;
        let seq = self.encoder.num_patches() + 1;
        let idx: Vec<(usize, usize)> = (0..batch).map(|b| (0, b * seq)).collect();
        let cls = g.tape.rows(&[tokens], &idx)?;
        self.head.forward(g, cls)
    }

    pub fn check_image<U: Real>(&self, image: &Tensor<U>) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.in_channels];
        if image.shape() != want {
            return Err(Error::Contract(format!("expected an image of shape {want:?}, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Scalar predictions for a batch, without gradient tracking.
    pub fn predict_batch<U: Real>(&self, images: &[&Tensor<U>]) -> Result<Vec<f64>> {
        for img in images {
            self.check_image(img)?;
        }
        let patches = patch_batch::<T, U>(images, self.config.patch_size)?;
        let mut g = Graph::new(&self.store, false);
        let p = g.tape.constant(patches);
        let out = self.forward(&mut g, p, images.len(), &mut Taps::default())?;
        Ok(g.tape.value(out).to_f64_vec())
    }

    pub fn predict<U: Real>(&self, image: &Tensor<U>) -> Result<f64> {
        Ok(self.predict_batch(&[image])?[0])
    }
}
