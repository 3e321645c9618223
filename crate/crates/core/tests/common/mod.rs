#![allow(dead_code)]

use fpbilstm::dsp::{build_channels, ChannelSet, FeatureConfig};
use fpbilstm::model::{batch_loss, FpBiLstm, ModelConfig};
use fpbilstm::nn::{Graph, Tensor, Var};
use fpbilstm::synth::{synth_generate, SynthSpec};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const LAYER_REL_TOL: f64 = 1e-4;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn bilstm_final(g: &mut Graph<'_>, x: Var, w: &[Var]) -> Var {
    let fw = g.lstm(x, w[0], w[1], w[2], false).unwrap();
    let bw = g.lstm(x, w[3], w[4], w[5], true).unwrap();
    let len = g.shape(x)[1];
    let a = g.select_time(fw, len - 1).unwrap();
    let b = g.select_time(bw, 0).unwrap();
    g.concat_last(&[a, b]).unwrap()
}

pub struct GradCase {
    pub name: String,
    /// Largest error as a multiple of its tolerance; at most 1 passes.
    pub ratio: f64,
    pub worst_rel: f64,
}

/// Compare analytic gradients of `sum(f(inputs) * probe)` with central
/// differences for every element of every input.
pub fn grad_case(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scalar = |g: &mut Graph<'_>, vars: &[Var], probe: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng| {
        let out = f(g, vars);
        let n = g.value(out).len();
        let p = probe.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        g.weighted_sum(out, p).unwrap()
    };
    let mut probe = None;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone().with_grad())).collect();
    let loss = scalar(&mut g, &vars, &mut probe, &mut rng);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor], probe: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| g.input(x.clone())).collect();
        let l = scalar(&mut g, &vars, probe, rng);
        g.value(l).item()
    };
    let (mut ratio, mut worst_rel) = (0.0f64, 0.0f64);
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, &mut probe, &mut rng) - eval(&minus, &mut probe, &mut rng)) / (2.0 * STEP);
            let a = analytic[k][i];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            ratio = ratio.max(err / (LAYER_REL_TOL * scale + 1e-8));
            worst_rel = worst_rel.max(err / (scale + 1e-12));
        }
    }
    GradCase { name: name.to_string(), ratio, worst_rel }
}

/// Every layer family of the model on small random shapes.
pub fn layer_gradient_suite() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kernel in [15, 10, 5] {
        let inputs = [random(&mut rng, &[2, 16, 4], 1.0), random(&mut rng, &[kernel, 4, 3], 0.5), random(&mut rng, &[3], 0.5)];
        cases.push(grad_case(&format!("conv1d k={kernel}"), &inputs, |g, v| g.conv1d(v[0], v[1], v[2]).unwrap()));
    }
    cases.push(grad_case("maxpool", &[random(&mut rng, &[2, 16, 4], 1.0)], |g, v| g.maxpool1d(v[0], 4, 2).unwrap()));

    let inputs = [random(&mut rng, &[2, 16, 4], 2.0), random(&mut rng, &[4], 1.5), random(&mut rng, &[4], 1.0)];
    cases.push(grad_case("batch_norm train", &inputs, |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0));
    cases.push(grad_case("batch_norm infer", &inputs, |g, v| {
        g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.5, 0.5, 2.0, 1.0], 1e-5).unwrap()
    }));

    let h = 3;
    let inputs = [
        random(&mut rng, &[2, 6, 4], 1.0),
        random(&mut rng, &[4, 4 * h], 0.6),
        random(&mut rng, &[h, 4 * h], 0.6),
        random(&mut rng, &[4 * h], 0.6),
        random(&mut rng, &[4, 4 * h], 0.6),
        random(&mut rng, &[h, 4 * h], 0.6),
        random(&mut rng, &[4 * h], 0.6),
    ];
    cases.push(grad_case("lstm forward sequence", &inputs[..4], |g, v| g.lstm(v[0], v[1], v[2], v[3], false).unwrap()));
    cases.push(grad_case("lstm reverse sequence", &inputs[..4], |g, v| g.lstm(v[0], v[1], v[2], v[3], true).unwrap()));
    cases.push(grad_case("bilstm final", &inputs, |g, v| bilstm_final(g, v[0], &v[1..])));

    let inputs = [random(&mut rng, &[3, 5], 1.0), random(&mut rng, &[5, 4], 1.0), random(&mut rng, &[4], 1.0)];
    cases.push(grad_case("dense relu", &inputs, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        g.relu(y)
    }));
    cases.push(grad_case("dense softmax", &inputs, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        g.softmax(y)
    }));
    let pair = [random(&mut rng, &[4, 8], 1.0), random(&mut rng, &[4, 8], 1.0)];
    cases.push(grad_case("mse", &pair, |g, v| g.mse(v[0], v[1]).unwrap()));
    cases.push(grad_case("concat", &pair, |g, v| g.concat_last(&[v[0], v[1]]).unwrap()));
    cases
}

/// The default wiring (five conv layers, taps 1,2,3,5) with narrow layers.
pub fn narrow_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    for (layer, filters) in cfg.conv_stack.iter_mut().zip([4, 4, 6, 6, 8]) {
        layer.filters = filters;
    }
    cfg.bilstm_units = 3;
    cfg.dense_sizes = vec![10, 8];
    cfg
}

/// Synthetic 5 s frames at 20 Hz (length 100) with the default channels.
pub fn synth_sets(frames_per_mode: usize, seed: u64) -> Vec<ChannelSet> {
    let spec = SynthSpec { frames_per_mode, ..SynthSpec::default() };
    let ds = synth_generate(&spec, seed).unwrap();
    let feat = FeatureConfig::default();
    ds.frames().iter().map(|f| build_channels(f, &feat).unwrap()).collect()
}

fn loss_of(model: &FpBiLstm, sets: &[&ChannelSet]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = batch_loss(model, &mut g, sets, true).unwrap();
    g.value(loss).item()
}

/// Worst relative error between analytic and central-difference gradients of
/// the training-mode loss, over `per_tensor` sampled elements of every
/// parameter tensor. Elements whose gradients are both tiny are skipped.
pub fn model_grad_check(model: &mut FpBiLstm, sets: &[&ChannelSet], per_tensor: usize, seed: u64) -> (f64, usize) {
    let analytic = {
        let mut g = Graph::new();
        let (loss, _) = batch_loss(model, &mut g, sets, true).unwrap();
        g.backward(loss).unwrap();
        g.param_grads()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    for (id, grad) in analytic {
        let n = grad.len();
        for i in sample(&mut rng, n, per_tensor.min(n)).into_iter() {
            let orig = model.store().value(id).data()[i];
            model.store_mut().value_mut(id).data_mut()[i] = orig + step;
            let plus = loss_of(model, sets);
            model.store_mut().value_mut(id).data_mut()[i] = orig - step;
            let minus = loss_of(model, sets);
            model.store_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let scale = grad[i].abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            worst = worst.max((grad[i] - numeric).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}
