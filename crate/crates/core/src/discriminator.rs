//! Domain classifiers over encoder features or decoder predictions.
//!
//! Scores are the probability that the input came from the TARGET domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvCache};
use crate::params::{ParamGrads, ParameterSet};
use crate::tensor::Tensor3;

/// Scores are clamped to `[EPS, 1 - EPS]` so both `ln D` and `ln(1 - D)` stay finite.
pub const SCORE_EPS: f64 = 1e-7;

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// One score per input (logits averaged before squashing).
    Scalar,
    /// One score per output cell.
    PatchMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    /// Channels of the first strided layer; doubled at every further layer.
    pub width: usize,
    /// Number of stride-2 convolutions before the scoring layer.
    pub strided_layers: usize,
    pub output_mode: OutputMode,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            width: 16,
            strided_layers: 3,
            output_mode: OutputMode::PatchMap,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.width == 0 {
            return Err(Error::Config(
                "discriminator channels and width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    layers: Vec<Conv2d>,
    template: ParameterSet,
}

/// Forward activations kept for [`Discriminator::backward`].
#[derive(Clone, Debug)]
pub struct DiscriminatorCache {
    inputs: Vec<Tensor3>,
    caches: Vec<ConvCache>,
    outputs: Vec<Tensor3>,
    /// Pre-clamp scores.
    raw: Vec<f64>,
    scores: Vec<f64>,
}

impl DiscriminatorCache {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        let (d, _) = Self::build(config, 0)?;
        Ok(d)
    }

    pub fn init(config: &DiscriminatorConfig, seed: u64) -> Result<ParameterSet> {
        let (_, p) = Self::build(config.clone(), seed)?;
        Ok(p)
    }

    fn build(config: DiscriminatorConfig, seed: u64) -> Result<(Self, ParameterSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let mut layers = Vec::with_capacity(config.strided_layers + 1);
        let mut cin = config.input_channels;
        for i in 0..config.strided_layers {
            let cout = config.width << i;
            layers.push(Conv2d::register(&mut p, &format!("conv{i}"), cin, cout, 3, 2, 1, &mut rng)?);
            cin = cout;
        }
        layers.push(Conv2d::register(&mut p, "head", cin, 1, 3, 1, 1, &mut rng)?);
        let d = Self {
            config,
            layers,
            template: p.clone(),
        };
        Ok((d, p))
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        self.template.check_same_structure(params)
    }

    /// Domain scores for one input.
    pub fn forward(&self, params: &ParameterSet, input: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.forward_train(params, input)?.scores)
    }

    pub fn forward_train(&self, params: &ParameterSet, input: &Tensor3) -> Result<DiscriminatorCache> {
        if input.channels() != self.config.input_channels {
            return Err(Error::Input(format!(
                "discriminator expects {} channels, got {}",
                self.config.input_channels,
                input.channels()
            )));
        }
        self.check_params(params)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, c) = layer.forward(params, &x)?;
            if i + 1 < n {
                nn::leaky_relu_inplace(&mut y, LEAK);
            }
            inputs.push(x);
            caches.push(c);
            x = y.clone();
            outputs.push(y);
        }
        let logits = outputs.last().expect("at least the head layer");
        let raw: Vec<f64> = match self.config.output_mode {
            OutputMode::PatchMap => logits.data().iter().map(|&z| nn::sigmoid(z)).collect(),
            OutputMode::Scalar => vec![nn::sigmoid(logits.mean())],
        };
        let scores = raw
            .iter()
            .map(|&s| s.clamp(SCORE_EPS, 1.0 - SCORE_EPS))
            .collect();
        Ok(DiscriminatorCache {
            inputs,
            caches,
            outputs,
            raw,
            scores,
        })
    }

    /// Back-propagates `d_scores` (one entry per score). Parameter gradients
    /// are accumulated into `grads` when given; the input gradient is returned
    /// when requested.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &DiscriminatorCache,
        d_scores: &[f64],
        grads: Option<&mut ParamGrads>,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        debug_assert_eq!(d_scores.len(), cache.scores.len());
        let logits = cache.outputs.last().expect("head output");
        let (c, h, w) = logits.shape();
        let mut g = Tensor3::zeros(c, h, w);
        // sigmoid' = s(1-s); the clamp passes gradient only strictly inside.
        let pass = |raw: f64, ds: f64| {
            if raw > SCORE_EPS && raw < 1.0 - SCORE_EPS {
                ds * raw * (1.0 - raw)
            } else {
                0.0
            }
        };
        match self.config.output_mode {
            OutputMode::PatchMap => {
                for ((gv, &raw), &ds) in g.data_mut().iter_mut().zip(&cache.raw).zip(d_scores) {
                    *gv = pass(raw, ds);
                }
            }
            OutputMode::Scalar => {
                let dz = pass(cache.raw[0], d_scores[0]) / logits.len() as f64;
                g.data_mut().iter_mut().for_each(|v| *v = dz);
            }
        }

        let mut scratch;
        let grads: &mut ParamGrads = match grads {
            Some(gr) => gr,
            None => {
                scratch = params.zero_grads();
                &mut scratch
            }
        };
        let n = self.layers.len();
        for i in (0..n).rev() {
            if i + 1 < n {
                nn::leaky_relu_backward_inplace(&cache.outputs[i], &mut g, LEAK);
            }
            let need = want_input_grad || i > 0;
            {
                let next = self.layers[i].backward(params, &cache.inputs[i], &cache.caches[i], &g, grads, need)?;
                g = next
            }
        }
        Some(g)
    }

    /// Name of the final scoring layer's weight array.
    pub const HEAD_WEIGHT: &'static str = "head.weight";
    pub const HEAD_BIAS: &'static str = "head.bias";
}
