use rand::Rng;

use super::block::Linear;
use crate::params::{Graph, ParamStore};
use crate::tensor::{Real, Var};
use crate::Result;

/// Class token → dense(hidden) → GELU → dense(1).
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub(crate) fc1: Linear,
    pub(crate) fc2: Linear,
}

impl RegressionHead {
    pub const PREFIX: &'static str = "head";

    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, width: usize, hidden: usize, rng: &mut R) -> Self {
        RegressionHead {
            fc1: Linear::new(store, "head.fc1", width, hidden, rng),
            fc2: Linear::new(store, "head.fc2", hidden, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Result<Var> {
        let h = self.fc1.forward(g, cls)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn output_weight(&self) -> crate::params::ParamId {
        self.fc2.w
    }

    pub fn output_bias(&self) -> crate::params::ParamId {
        self.fc2.b
    }
}
