//! Frozen feature extractors for the content loss.

use std::collections::HashMap;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{max_pool2x2, Conv2dSpec};
use crate::tensor::{Rng, Shape, Tensor};

use super::layers::Conv;

/// Seed of the built-in random extractor; fixed so features match across installs.
pub const TINY_FIXED_SEED: u64 = 2018;
const TINY_CHANNELS: [usize; 3] = [32, 64, 128];

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Convolutions per VGG-19 block.
const VGG19_BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    TinyFixed,
    Vgg19Loaded,
}

enum Stage {
    Conv(Conv),
    Relu,
    Pool,
}

pub struct FeatureExtractor {
    kind: FeatureKind,
    layer_tag: String,
    stages: Vec<Stage>,
}

fn frozen(mut conv: Conv) -> Conv {
    conv.weight.set_trainable(false);
    if let Some(b) = &mut conv.bias {
        b.set_trainable(false);
    }
    conv
}

impl FeatureExtractor {
    /// Three stride-2 3x3 conv + ReLU stages (32, 64, 128 channels) with
    /// He-scaled normal weights drawn from [`TINY_FIXED_SEED`].
    pub fn tiny_fixed() -> FeatureExtractor {
        let mut rng = Rng::new(TINY_FIXED_SEED);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in TINY_CHANNELS.iter().enumerate() {
            let spec = Conv2dSpec::new(cin, c, 3, 2, 1);
            let std = (2.0 / (cin * 9) as f32).sqrt();
            let w = Tensor::random_normal(spec.weight_shape(), 0.0, std, &mut rng).expect("std is positive");
            stages.push(Stage::Conv(frozen(Conv::with_weight(&format!("features.conv{}", i + 1), spec, w))));
            stages.push(Stage::Relu);
            cin = c;
        }
        FeatureExtractor {
            kind: FeatureKind::TinyFixed,
            layer_tag: "relu3".into(),
            stages,
        }
    }

    /// VGG-19 convolution stack up to `layer_tag` (e.g. `relu5_4`), weights
    /// named `features.conv{block}_{index}.weight` / `.bias` in `tensors`.
    /// Inputs in `[0, 1]` are normalized with the ImageNet mean and std.
    pub fn vgg19(tensors: &HashMap<String, Tensor>, layer_tag: &str) -> Result<FeatureExtractor> {
        let bad_tag = || Error::InvalidConfig(format!("unknown VGG-19 layer tag {layer_tag:?} (expected relu<block>_<index>)"));
        let (block, index) = layer_tag
            .strip_prefix("relu")
            .and_then(|t| t.split_once('_'))
            .and_then(|(b, i)| Some((b.parse::<usize>().ok()?, i.parse::<usize>().ok()?)))
            .ok_or_else(bad_tag)?;
        if block == 0 || block > 5 || index == 0 || index > VGG19_BLOCKS[block - 1] {
            return Err(bad_tag());
        }

        // Per-channel (x - mean) / std as a fixed 1x1 convolution.
        let norm_spec = Conv2dSpec::new(3, 3, 1, 1, 0);
        let w = Tensor::from_fn(norm_spec.weight_shape(), |o, i, _, _| if o == i { 1.0 / IMAGENET_STD[o] } else { 0.0 });
        let mut norm = Conv::with_weight("features.normalize", norm_spec, w);
        let bias = Tensor::from_fn(Shape { n: 1, c: 3, h: 1, w: 1 }, |_, c, _, _| -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
        norm.bias.as_mut().unwrap().set_value(bias)?;
        let mut stages = vec![Stage::Conv(frozen(norm))];

        let mut cin = 3;
        'outer: for (b, &count) in VGG19_BLOCKS.iter().enumerate().take(block) {
            if b > 0 {
                stages.push(Stage::Pool);
            }
            for i in 0..count {
                let name = format!("features.conv{}_{}", b + 1, i + 1);
                let get = |suffix: &str| {
                    tensors
                        .get(&format!("{name}.{suffix}"))
                        .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}.{suffix}")))
                };
                let w = get("weight")?;
                let ws = w.shape();
                if ws.c != cin || ws.h != 3 || ws.w != 3 {
                    return Err(Error::WeightFormat(format!(
                        "{name}.weight: expected (*, {cin}, 3, 3), got {ws}"
                    )));
                }
                let spec = Conv2dSpec::same(cin, ws.n, 3);
                let mut conv = Conv::with_weight(&name, spec, w.clone());
                conv.bias
                    .as_mut()
                    .unwrap()
                    .set_value(get("bias")?.clone().reshape(Shape { n: 1, c: ws.n, h: 1, w: 1 })?)?;
                stages.push(Stage::Conv(frozen(conv)));
                stages.push(Stage::Relu);
                cin = ws.n;
                if b + 1 == block && i + 1 == index {
                    break 'outer;
                }
            }
        }
        Ok(FeatureExtractor {
            kind: FeatureKind::Vgg19Loaded,
            layer_tag: layer_tag.into(),
            stages,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for s in &self.stages {
            if let Stage::Conv(c) = s {
                c.params(&mut v);
            }
        }
        v
    }

    /// Feature map `(n, C_j, H_j, W_j)`; differentiable in `x` only.
    pub fn extract<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        if x.shape().c != 3 {
            return Err(Error::ChannelMismatch {
                op: "extract_features",
                expected: 3,
                actual: x.shape().c,
            });
        }
        let mut h = x.clone();
        for s in &self.stages {
            h = match s {
                Stage::Conv(c) => c.forward(tape, &h)?,
                Stage::Relu => h.relu(),
                Stage::Pool => max_pool2x2(&h)?,
            };
        }
        Ok(h)
    }
}
