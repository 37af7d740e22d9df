//! U-Net style encoder–decoder returning both the bottleneck feature and the
//! per-pixel class probabilities from a single forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvCache, UpConv2x2};
use crate::params::{ParamGrads, ParameterSet};
use crate::tensor::{EncoderFeature, ImageTensor, SoftPrediction, Tensor3, NUM_CLASSES};

const LEAK: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Side of the square input in pixels.
    pub input_size: usize,
    /// Number of 2× down-sampling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Standardize every convolution output per channel before the rectifier.
    pub instance_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            depth: 4,
            base_channels: 16,
            in_channels: 3,
            instance_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("backbone depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "backbone base_channels {} < 4",
                self.base_channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("backbone in_channels must be positive".into()));
        }
        let f = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channel width at stage `i` (the bottleneck is stage `depth`).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Channels of the bottleneck feature (`C_e`).
    pub fn feature_channels(&self) -> usize {
        self.stage_channels(self.depth)
    }

    /// Side of the bottleneck grid.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Down-sampling factor between the input and the bottleneck grid.
    pub fn downsample_factor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv_a: Conv2d,
    conv_b: Conv2d,
    norm: bool,
}

/// Layer plan for a given configuration; parameter indices refer to the
/// [`ParameterSet`] produced by [`Backbone::init`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    encoder: Vec<Stage>,
    bottleneck: Stage,
    ups: Vec<UpConv2x2>,
    decoder: Vec<Stage>,
    head: Conv2d,
    template: ParameterSet,
}

/// Activations retained by [`Backbone::forward_train`] for back-propagation.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    input: Tensor3,
    enc: Vec<StageCache>,
    pool_args: Vec<Vec<usize>>,
    bottleneck: StageCache,
    up_inputs: Vec<Tensor3>,
    dec: Vec<StageCache>,
    head_cache: ConvCache,
    head_input: Tensor3,
    feature: Tensor3,
    prob: Tensor3,
}

#[derive(Clone, Debug)]
struct StageCache {
    a_in: Tensor3,
    a_cache: ConvCache,
    a_out: Tensor3,
    a_inv_std: Vec<f64>,
    b_cache: ConvCache,
    b_out: Tensor3,
    b_inv_std: Vec<f64>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        // build the plan once with a throwaway rng; shapes do not depend on it
        let (plan, _) = Self::build(config, 0)?;
        Ok(plan)
    }

    /// Creates fan-in scaled normal weights (zero biases), deterministic in `seed`.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<ParameterSet> {
        let (_, params) = Self::build(config.clone(), seed)?;
        Ok(params)
    }

    fn build(config: BackboneConfig, seed: u64) -> Result<(Self, ParameterSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let d = config.depth;
        let ch = |i| config.stage_channels(i);
        let norm = config.instance_norm;

        let mut encoder = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { config.in_channels } else { ch(i - 1) };
            encoder.push(Stage {
                conv_a: Conv2d::register(&mut p, &format!("enc{i}.conv1"), cin, ch(i), 3, 1, 1, &mut rng)?,
                conv_b: Conv2d::register(&mut p, &format!("enc{i}.conv2"), ch(i), ch(i), 3, 1, 1, &mut rng)?,
                norm,
            });
        }
        let bottleneck = Stage {
            conv_a: Conv2d::register(&mut p, "bottleneck.conv1", ch(d - 1), ch(d), 3, 1, 1, &mut rng)?,
            conv_b: Conv2d::register(&mut p, "bottleneck.conv2", ch(d), ch(d), 3, 1, 1, &mut rng)?,
            norm,
        };
        // decoder stages are stored deepest first, in execution order
        let mut ups = Vec::with_capacity(d);
        let mut decoder = Vec::with_capacity(d);
        for i in (0..d).rev() {
            ups.push(UpConv2x2::register(&mut p, &format!("dec{i}.up"), ch(i + 1), ch(i), &mut rng)?);
            decoder.push(Stage {
                conv_a: Conv2d::register(&mut p, &format!("dec{i}.conv1"), 2 * ch(i), ch(i), 3, 1, 1, &mut rng)?,
                conv_b: Conv2d::register(&mut p, &format!("dec{i}.conv2"), ch(i), ch(i), 3, 1, 1, &mut rng)?,
                norm,
            });
        }
        let head = Conv2d::register(&mut p, "head", ch(0), NUM_CLASSES, 1, 1, 0, &mut rng)?;

        let plan = Self {
            config,
            encoder,
            bottleneck,
            ups,
            decoder,
            head,
            template: p.clone(),
        };
        Ok((plan, p))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Verifies that `params` were produced for this configuration.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        self.template.check_same_structure(params)
    }

    fn check_image(&self, image: &Tensor3) -> Result<()> {
        let s = self.config.input_size;
        if image.height() != s || image.width() != s || image.channels() != self.config.in_channels
        {
            return Err(Error::Input(format!(
                "backbone expects {}x{}x{} input, got {}x{}x{}",
                s,
                s,
                self.config.in_channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(
        &self,
        params: &ParameterSet,
        image: &ImageTensor,
    ) -> Result<(EncoderFeature, SoftPrediction)> {
        let cache = self.forward_train(params, image.tensor())?;
        let (feature, prob) = cache.into_outputs();
        Ok((
            EncoderFeature::new(feature)?,
            SoftPrediction::from_tensor_unchecked(prob),
        ))
    }

    /// Forward pass keeping every activation needed by [`Backbone::backward`].
    /// Accepts any tensor of the configured shape (inputs are not range-checked).
    pub fn forward_train(&self, params: &ParameterSet, input: &Tensor3) -> Result<BackboneCache> {
        self.check_image(input)?;
        self.check_params(params)?;
        let d = self.config.depth;
        let mut enc = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        let mut pool_args = Vec::with_capacity(d);

        let mut x = input.clone();
        for stage in &self.encoder {
            let sc = stage_forward(stage, params, x)?;
            let (px, arg) = nn::max_pool2x2(&sc.b_out);
            skips.push(sc.b_out.clone());
            enc.push(sc);
            pool_args.push(arg);
            x = px;
        }
        let bottleneck = stage_forward(&self.bottleneck, params, x)?;
        let feature = bottleneck.b_out.clone();

        let mut y = feature.clone();
        let mut up_inputs = Vec::with_capacity(d);
        let mut dec = Vec::with_capacity(d);
        for (k, (up, stage)) in self.ups.iter().zip(&self.decoder).enumerate() {
            let level = d - 1 - k;
            let u = up.forward(params, &y)?;
            up_inputs.push(y);
            let cat = Tensor3::concat_channels(&u, &skips[level]);
            let sc = stage_forward(stage, params, cat)?;
            y = sc.b_out.clone();
            dec.push(sc);
        }
        let (logits, head_cache) = self.head.forward(params, &y)?;
        let prob = nn::softmax_channels(&logits);
        Ok(BackboneCache {
            input: input.clone(),
            enc,
            pool_args,
            bottleneck,
            up_inputs,
            dec,
            head_cache,
            head_input: y,
            feature,
            prob,
        })
    }

    /// Back-propagates upstream gradients on the bottleneck feature and/or the
    /// class probabilities, accumulating into `grads`.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &BackboneCache,
        d_feature: Option<&Tensor3>,
        d_prob: Option<&Tensor3>,
        grads: &mut ParamGrads,
    ) {
        let d = self.config.depth;
        let mut d_skips: Vec<Option<Tensor3>> = vec![None; d];

        let mut dy = match d_prob {
            Some(dp) => {
                let dlogits = nn::softmax_channels_backward(&cache.prob, dp);
                self.head
                    .backward(params, &cache.head_input, &cache.head_cache, &dlogits, grads, true)
            }
            None => None,
        };

        if let Some(mut g) = dy.take() {
            for k in (0..d).rev() {
                let level = d - 1 - k;
                let dcat = stage_backward(&self.decoder[k], params, &cache.dec[k], g, grads, true)
                    .expect("input gradient requested");
                let (du, dskip) = dcat.split_channels(self.config.stage_channels(level));
                d_skips[level] = Some(dskip);
                g = self.ups[k].backward(params, &cache.up_inputs[k], &du, grads);
            }
            dy = Some(g);
        }

        let d_bottleneck = match (dy, d_feature) {
            (Some(mut g), Some(f)) => {
                g.add_assign(f);
                Some(g)
            }
            (Some(g), None) => Some(g),
            (None, Some(f)) => Some(f.clone()),
            (None, None) => None,
        };
        let Some(g) = d_bottleneck else {
            return;
        };

        let mut g = stage_backward(&self.bottleneck, params, &cache.bottleneck, g, grads, true)
            .expect("input gradient requested");
        for i in (0..d).rev() {
            let sc = &cache.enc[i];
            let mut dstage = nn::max_pool2x2_backward(sc.b_out.shape(), &cache.pool_args[i], &g);
            if let Some(ds) = &d_skips[i] {
                dstage.add_assign(ds);
            }
            let want_input = i > 0;
            match stage_backward(&self.encoder[i], params, sc, dstage, grads, want_input) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Number of scalar weights implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        self.template.num_scalars()
    }

    pub fn template(&self) -> &ParameterSet {
        &self.template
    }
}

impl BackboneCache {
    pub fn feature(&self) -> &Tensor3 {
        &self.feature
    }

    pub fn prob(&self) -> &Tensor3 {
        &self.prob
    }

    pub fn input(&self) -> &Tensor3 {
        &self.input
    }

    pub fn into_outputs(self) -> (Tensor3, Tensor3) {
        (self.feature, self.prob)
    }
}

fn norm_act(stage: &Stage, mut x: Tensor3) -> (Tensor3, Vec<f64>) {
    let inv_std = if stage.norm {
        let (y, s) = nn::instance_norm(&x);
        x = y;
        s
    } else {
        Vec::new()
    };
    nn::leaky_relu_inplace(&mut x, LEAK);
    (x, inv_std)
}

/// Backward through the rectifier and, if present, the normalization.
fn norm_act_backward(stage: &Stage, out: &Tensor3, inv_std: &[f64], g: &mut Tensor3) {
    nn::leaky_relu_backward_inplace(out, g, LEAK);
    if stage.norm {
        // the rectifier keeps signs, so the normalized values are recoverable
        let mut normed = out.clone();
        for v in normed.data_mut() {
            if *v < 0.0 {
                *v /= LEAK;
            }
        }
        *g = nn::instance_norm_backward(&normed, inv_std, g);
    }
}

fn stage_forward(stage: &Stage, params: &ParameterSet, x: Tensor3) -> Result<StageCache> {
    let (a_lin, a_cache) = stage.conv_a.forward(params, &x)?;
    let (a_out, a_inv_std) = norm_act(stage, a_lin);
    let (b_lin, b_cache) = stage.conv_b.forward(params, &a_out)?;
    let (b_out, b_inv_std) = norm_act(stage, b_lin);
    Ok(StageCache {
        a_in: x,
        a_cache,
        a_out,
        a_inv_std,
        b_cache,
        b_out,
        b_inv_std,
    })
}

fn stage_backward(
    stage: &Stage,
    params: &ParameterSet,
    sc: &StageCache,
    mut g: Tensor3,
    grads: &mut ParamGrads,
    want_input: bool,
) -> Option<Tensor3> {
    norm_act_backward(stage, &sc.b_out, &sc.b_inv_std, &mut g);
    let mut g = stage
        .conv_b
        .backward(params, &sc.a_out, &sc.b_cache, &g, grads, true)
        .expect("input gradient requested");
    norm_act_backward(stage, &sc.a_out, &sc.a_inv_std, &mut g);
    stage
        .conv_a
        .backward(params, &sc.a_in, &sc.a_cache, &g, grads, want_input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_size: 16,
            depth: 2,
            base_channels: 4,
            in_channels: 3,
            instance_norm: true,
        }
    }

    fn image(size: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * size * size).map(|_| rng.gen::<f64>()).collect();
        ImageTensor::new(Tensor3::from_vec(3, size, size, data).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = Backbone::init(&tiny(), 1).unwrap();
        let b = Backbone::init(&tiny(), 1).unwrap();
        let c = Backbone::init(&tiny(), 2).unwrap();
        assert!(a.values_bit_equal(&b));
        assert!(!a.values_bit_equal(&c));
        assert!(a.all_finite());
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = BackboneConfig {
            input_size: 20,
            depth: 3,
            ..tiny()
        };
        assert!(matches!(Backbone::init(&cfg, 0), Err(Error::Config(_))));
    }

    /// Weights per layer written out by hand for depth 4, base 16, RGB input:
    ///
    /// | layer | weights + biases |
    /// |---|---|
    /// | enc0 | 3·16·9+16 = 448, 16·16·9+16 = 2320 |
    /// | enc1 | 16·32·9+32 = 4640, 32·32·9+32 = 9248 |
    /// | enc2 | 32·64·9+64 = 18496, 64·64·9+64 = 36928 |
    /// | enc3 | 64·128·9+128 = 73856, 128·128·9+128 = 147584 |
    /// | bottleneck | 128·256·9+256 = 295168, 256·256·9+256 = 590080 |
    /// | dec3 | up 256·128·4+128 = 131200, 256·128·9+128 = 295040, 147584 |
    /// | dec2 | up 128·64·4+64 = 32832, 128·64·9+64 = 73792, 36928 |
    /// | dec1 | up 64·32·4+32 = 8224, 64·32·9+32 = 18464, 9248 |
    /// | dec0 | up 32·16·4+16 = 2064, 32·16·9+16 = 4624, 2320 |
    /// | head | 16·3+3 = 51 |
    #[test]
    fn parameter_count_matches_hand_arithmetic() {
        let enc = 448 + 2320 + 4640 + 9248 + 18496 + 36928 + 73856 + 147584;
        let bottleneck = 295168 + 590080;
        let dec = (131200 + 295040 + 147584)
            + (32832 + 73792 + 36928)
            + (8224 + 18464 + 9248)
            + (2064 + 4624 + 2320);
        let head = 51;
        let expected = enc + bottleneck + dec + head;
        assert_eq!(expected, 1_941_139);
        let plan = Backbone::new(BackboneConfig {
            input_size: 128,
            depth: 4,
            base_channels: 16,
            in_channels: 3,
            instance_norm: true,
        })
        .unwrap();
        assert_eq!(plan.parameter_count(), expected);
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = BackboneConfig {
            input_size: 32,
            depth: 2,
            base_channels: 4,
            in_channels: 3,
            instance_norm: true,
        };
        let plan = Backbone::new(cfg.clone()).unwrap();
        let params = Backbone::init(&cfg, 0).unwrap();
        let (f, p) = plan.forward(&params, &image(32, 0)).unwrap();
        assert_eq!(f.tensor().shape(), (16, 8, 8));
        assert_eq!(p.tensor().shape(), (3, 32, 32));
        // the same checks on a different input: shape depends on config only
        let (f2, p2) = plan.forward(&params, &image(32, 1)).unwrap();
        assert_eq!(f.tensor().shape(), f2.tensor().shape());
        assert_eq!(p.tensor().shape(), p2.tensor().shape());
    }

    #[test]
    fn probabilities_form_a_simplex_and_are_deterministic() {
        let plan = Backbone::new(tiny()).unwrap();
        let params = Backbone::init(&tiny(), 4).unwrap();
        let img = image(16, 3);
        let (f1, p1) = plan.forward(&params, &img).unwrap();
        let (f2, p2) = plan.forward(&params, &img).unwrap();
        assert!(SoftPrediction::new(p1.tensor().clone()).is_ok());
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn wrong_input_size_is_input_error() {
        let plan = Backbone::new(tiny()).unwrap();
        let params = Backbone::init(&tiny(), 4).unwrap();
        assert!(matches!(
            plan.forward(&params, &image(32, 0)),
            Err(Error::Input(_))
        ));
    }
}
