//! Analytic gradients against central finite differences, in f64.

use cfea::backbone::{Backbone, BackboneConfig};
use cfea::discriminator::{Discriminator, DiscriminatorConfig, OutputMode};
use cfea::losses::{
    adversarial_loss, adversarial_loss_grad, consistency_mse, consistency_mse_grad, dice_loss,
    dice_loss_grad, domain_classification_loss, domain_classification_loss_grad, AdversarialForm,
};
use cfea::params::ParameterSet;
use cfea::tensor::{LabelMask, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-5)
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3 {
    let data = (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor3::from_vec(c, h, w, data).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor3 {
    let mut t = random_tensor(rng, 3, h, w, 0.05, 1.0);
    let n = h * w;
    for i in 0..n {
        let s: f64 = (0..3).map(|c| t.data()[c * n + i]).sum();
        for c in 0..3 {
            t.data_mut()[c * n + i] /= s;
        }
    }
    t
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    LabelMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..3u8)).collect()).unwrap()
}

/// Checks `grad` against central differences of `f` at every element of `x`.
fn check_tensor(name: &str, x: &Tensor3, grad: &Tensor3, f: impl Fn(&Tensor3) -> f64) {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let num = (f(&p) - f(&m)) / (2.0 * H);
        worst = worst.max(rel_err(grad.data()[i], num));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn check_scores(name: &str, s: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
    for i in 0..s.len() {
        let mut p = s.to_vec();
        p[i] += H;
        let mut m = s.to_vec();
        m[i] -= H;
        let num = (f(&p) - f(&m)) / (2.0 * H);
        let e = rel_err(grad[i], num);
        assert!(e < TOL, "{name}[{i}]: analytic {} numeric {num} (rel {e:e})", grad[i]);
    }
}

pub fn dice_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let p = random_simplex(&mut rng, 4, 4);
        let m = random_mask(&mut rng, 4, 4);
        let (_, g) = dice_loss_grad(&p, &m).unwrap();
        check_tensor("dice", &p, &g, |t| dice_loss(t, &m).unwrap());
    }
}

pub fn consistency_mse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, 2, 3, 4, -1.0, 1.0);
    let b = random_tensor(&mut rng, 2, 3, 4, -1.0, 1.0);
    let (_, g) = consistency_mse_grad(&a, &b).unwrap();
    check_tensor("mse", &a, &g, |t| consistency_mse(t, &b).unwrap());
}

pub fn adversarial_and_domain_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
    let t: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
    for form in [AdversarialForm::NonSaturating, AdversarialForm::Saturating] {
        let (_, g) = adversarial_loss_grad(&s, form);
        check_scores("adversarial", &s, &g, |x| adversarial_loss(x, form));
    }
    let (_, gt, gs) = domain_classification_loss_grad(&t, &s);
    check_scores("domain/target", &t, &gt, |x| domain_classification_loss(x, &s));
    check_scores("domain/source", &s, &gs, |x| domain_classification_loss(&t, x));
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: 16,
        depth: 2,
        base_channels: 4,
        in_channels: 3,
        instance_norm: true,
    }
}

/// Scalar objective touching both backbone outputs.
fn backbone_objective(
    net: &Backbone,
    params: &ParameterSet,
    x: &Tensor3,
    rf: &Tensor3,
    mask: &LabelMask,
) -> f64 {
    let c = net.forward_train(params, x).unwrap();
    let lin: f64 = c.feature().data().iter().zip(rf.data()).map(|(a, b)| a * b).sum();
    lin + dice_loss(c.prob(), mask).unwrap()
}

fn check_params(
    name: &str,
    params: &ParameterSet,
    grads: &cfea::params::ParamGrads,
    stride: usize,
    f: impl Fn(&ParameterSet) -> f64,
) {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (ai, (pname, arr)) in params.iter().enumerate() {
        for j in (0..arr.len()).step_by(stride.min(arr.len()).max(1)) {
            let mut p = params.clone();
            p.array_mut(ai).data[j] += H;
            let mut m = params.clone();
            m.array_mut(ai).data[j] -= H;
            let num = (f(&p) - f(&m)) / (2.0 * H);
            let e = rel_err(grads.arrays[ai][j], num);
            if e > worst.0 {
                worst = (e, format!("{pname}[{j}] analytic {} numeric {num}", grads.arrays[ai][j]));
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
    assert!(worst.0 < TOL, "{name}: {} (rel {:e})", worst.1, worst.0);
}

pub fn backbone_end_to_end_gradients() {
    let cfg = tiny_backbone();
    let net = Backbone::new(cfg.clone()).unwrap();
    let params = Backbone::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let rf = random_tensor(&mut rng, 16, 4, 4, -0.1, 0.1);
    let mask = random_mask(&mut rng, 16, 16);

    let cache = net.forward_train(&params, &x).unwrap();
    let (_, dprob) = dice_loss_grad(cache.prob(), &mask).unwrap();
    let mut grads = params.zero_grads();
    net.backward(&params, &cache, Some(&rf), Some(&dprob), &mut grads);
    check_params("backbone", &params, &grads, 7, |p| {
        backbone_objective(&net, p, &x, &rf, &mask)
    });
}

pub fn backbone_probability_path_alone() {
    let cfg = tiny_backbone();
    let net = Backbone::new(cfg.clone()).unwrap();
    let params = Backbone::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let target = random_simplex(&mut rng, 16, 16);
    let cache = net.forward_train(&params, &x).unwrap();
    let (_, dprob) = consistency_mse_grad(cache.prob(), &target).unwrap();
    let mut grads = params.zero_grads();
    net.backward(&params, &cache, None, Some(&dprob), &mut grads);
    check_params("backbone/prob", &params, &grads, 5, |p| {
        consistency_mse(net.forward_train(p, &x).unwrap().prob(), &target).unwrap()
    });
}

pub fn discriminator_gradients() {
    for mode in [OutputMode::PatchMap, OutputMode::Scalar] {
        let cfg = DiscriminatorConfig {
            input_channels: 3,
            width: 4,
            strided_layers: 2,
            output_mode: mode,
        };
        let disc = Discriminator::new(cfg.clone()).unwrap();
        let params = Discriminator::init(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_simplex(&mut rng, 8, 8);
        let loss = |p: &ParameterSet, x: &Tensor3| {
            let s = disc.forward(p, x).unwrap();
            domain_classification_loss(&s, &[])
                + adversarial_loss(&s, AdversarialForm::NonSaturating)
        };
        let cache = disc.forward_train(&params, &x).unwrap();
        let s = cache.scores().to_vec();
        let (_, g1, _) = domain_classification_loss_grad(&s, &[]);
        let (_, g2) = adversarial_loss_grad(&s, AdversarialForm::NonSaturating);
        let ds: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut grads = params.zero_grads();
        let dx = disc.backward(&params, &cache, &ds, Some(&mut grads), true).unwrap();
        check_params("discriminator", &params, &grads, 1, |p| loss(p, &x));
        check_tensor("discriminator/input", &x, &dx, |t| loss(&params, t));
    }
}
