//! Generator, discriminator and feature-extractor networks plus the weight
//! file they serialize to.

pub mod discriminator;
pub mod features;
pub mod generator;
pub mod layers;
pub mod pad;
pub mod weights;

use std::collections::HashMap;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use features::{FeatureExtractor, FeatureKind};
pub use generator::{Generator, GeneratorConfig, Variant};
pub use layers::Mode;
pub use pad::{pad_to_multiple, CropSpec};

fn is_running_stat(p: &Parameter) -> bool {
    p.name().ends_with(".running_mean") || p.name().ends_with(".running_var")
}

/// A trainable network with named parameters.
pub trait Model {
    /// Every parameter in a stable order, including non-trainable running stats.
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
    fn forward<'t>(&mut self, tape: &'t Tape, x: &Var<'t>, mode: Mode) -> Result<Var<'t>>;

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        self.params().iter().filter(|p| !is_running_stat(p)).map(|p| p.value().numel()).sum()
    }

    /// Frozen models still pass gradients to their input but compute none for
    /// their own weights.
    fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            if !is_running_stat(p) {
                p.set_trainable(!frozen);
            }
        }
    }

    fn load(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        weights::assign(self.params_mut(), tensors)
    }
}
