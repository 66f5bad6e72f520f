//! Central finite-difference checks for analytic gradients (f64 only).

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;
use crate::seed;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Maximum relative error between analytic and numeric input gradients.
pub fn input_grad_error(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Panics when any input gradient misses [`REL_TOL`].
pub fn check_input_grads(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let err = input_grad_error(inputs, f);
    assert!(err <= REL_TOL, "gradient check failed: max relative error {err:e}");
}

/// Maximum relative error over (up to `per_param` entries of) every trainable
/// parameter of `store`, for the scalar built by `f`.
pub fn param_grad_error(
    store: &ParamStore<f64>,
    per_param: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (id, grad) in &analytic {
        let n = grad.len();
        let stride = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_param) {
            let orig = probe.get(*id).data()[i];
            probe.get_mut(*id).data_mut()[i] = orig + FD_STEP;
            let mut gp = Graph::new();
            let o = f(&mut gp, &probe);
            let lp = gp.value(o).data()[0];
            probe.get_mut(*id).data_mut()[i] = orig - FD_STEP;
            let mut gm = Graph::new();
            let o = f(&mut gm, &probe);
            let lm = gm.value(o).data()[0];
            probe.get_mut(*id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grad.data()[i], numeric));
        }
    }
    worst
}

/// Adds `0.1 * N(0, 1)` to every parameter so no unit sits on a ReLU kink or
/// behind a zero-initialised projection during a check.
pub fn jitter_params(store: &mut ParamStore<f64>, seed_value: u64) {
    let ids: Vec<_> = store.ids().collect();
    let mut rng = seed::rng(seed_value);
    for id in ids {
        let t = store.get_mut(id);
        let noise = seed::normal_vec(&mut rng, t.len());
        for (v, e) in t.data_mut().iter_mut().zip(noise) {
            *v += 0.1 * e;
        }
    }
}

/// Worst relative gradient error of one trainable component.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub module: &'static str,
    pub max_rel_error: f64,
}

fn randn(shape: &[usize], s: u64) -> Tensor<f64> {
    Tensor::new(shape, seed::normal_vec(&mut seed::rng(s), shape.iter().product()))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, s: u64) -> Var {
    let w = g.constant(randn(g.shape(y), s));
    let p = g.mul(y, w);
    g.sum_all(p)
}

/// Finite-difference checks of every trainable component at tiny widths,
/// with parameters jittered off their initial values.
pub fn module_suite() -> crate::Result<Vec<GradReport>> {
    use crate::contrastive::{contrastive_loss, reconstruction_loss_graph, Perceptual};
    use crate::denoiser::{Attention, Backbone, Denoiser, DenoiserConfig};
    use crate::diffusion::ldm_loss_graph;
    use crate::encoders::{face_batch, speech_batch, EncoderConfig, Stage1};
    use crate::eval::probe::{image_batch, probe_faces, probe_loss, ProbeConfig, ProbeNet, OUTPUTS};
    use crate::synthdata::{generate_dataset, DataConfig};

    let mut out = Vec::new();
    let mut push = |module: &'static str, max_rel_error: f64| out.push(GradReport { module, max_rel_error });

    let enc = EncoderConfig {
        latent_dim: 8,
        resolution: 8,
        face_widths: vec![3, 4, 4],
        speech_widths: vec![3, 4, 4, 4],
        attention_after: 2,
        attention_reduction: 2,
        spec_bins: 9,
        spec_frames: 7,
    };
    let mut m = Stage1::<f64>::new(enc, 1)?;
    jitter_params(&mut m.params, 11);
    let img = randn(&[2, 3, 8, 8], 2).map(|v| v.abs().min(1.0));
    let spec = randn(&[2, 1, 9, 7], 3).map(f64::abs);
    let z = randn(&[2, 8], 4);
    push(
        "face encoder",
        param_grad_error(&m.params, 6, |g, store| {
            let x = g.constant(img.clone());
            let y = m.face_encoder.forward(g, store, x);
            weighted_sum(g, y, 5)
        }),
    );
    push(
        "speech encoder",
        param_grad_error(&m.params, 6, |g, store| {
            let s = g.constant(spec.clone());
            let y = m.speech_encoder.forward(g, store, s);
            weighted_sum(g, y, 6)
        }),
    );
    push(
        "face decoder",
        param_grad_error(&m.params, 6, |g, store| {
            let zz = g.constant(z.clone());
            let y = m.face_decoder.forward(g, store, zz);
            weighted_sum(g, y, 7)
        }),
    );

    push(
        "contrastive loss",
        input_grad_error(&[randn(&[4, 3], 5), randn(&[4, 3], 6), Tensor::new(&[1], vec![0.7])], |g, v| {
            contrastive_loss(g, v[0], v[1], v[2]).expect("non-zero rows")
        }),
    );

    let data = DataConfig {
        train: 3,
        val: 0,
        test: 0,
        seed: 1,
        resolution: 16,
        duration: 0.05,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&data)?;
    let mut s1 = Stage1::<f64>::new(
        EncoderConfig {
            latent_dim: 8,
            resolution: 16,
            face_widths: vec![3, 4, 4],
            speech_widths: vec![2, 3, 3, 3],
            attention_after: 2,
            attention_reduction: 2,
            spec_bins: data.stft.bins(),
            spec_frames: ds.samples[0].spec.frames,
        },
        4,
    )?;
    jitter_params(&mut s1.params, 12);
    let perceptual = Perceptual::<f64>::new();
    let x = face_batch::<f64>(&ds.samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let sp = speech_batch::<f64>(&ds.samples.iter().map(|s| &s.spec).collect::<Vec<_>>());
    push(
        "stage-1 objective",
        param_grad_error(&s1.params, 4, |g, store| {
            let xv = g.constant(x.clone());
            let zf = s1.face_encoder.forward(g, store, xv);
            let r = s1.face_decoder.forward(g, store, zf);
            let lr = reconstruction_loss_graph(g, &perceptual, xv, r);
            let sv = g.constant(sp.clone());
            let zs = s1.speech_encoder.forward(g, store, sv);
            let lt = g.param(store, s1.log_temperature);
            let lc = contrastive_loss(g, zs, zf, lt).expect("non-zero rows");
            g.add(lc, lr)
        }),
    );

    let mut store = ParamStore::<f64>::new();
    let cross = Attention::new(&mut store, "cross", 4, 3, 2, &mut seed::rng(13));
    let selfa = Attention::new(&mut store, "self", 4, 4, 2, &mut seed::rng(18));
    jitter_params(&mut store, 14);
    let xs = randn(&[2, 2, 4], 15);
    let cond = randn(&[2, 3], 16);
    push(
        "attention",
        param_grad_error(&store, 8, |g, st| {
            let xv = g.constant(xs.clone());
            let cv = g.constant(cond.clone());
            let y = cross.cross_attention(g, st, xv, cv).expect("condition shape");
            let y = selfa.self_attention(g, st, y);
            weighted_sum(g, y, 17)
        }),
    );

    for (name, backbone) in [("denoiser (grid)", Backbone::Grid), ("denoiser (mlp)", Backbone::Mlp)] {
        let cfg = DenoiserConfig {
            latent_dim: 8,
            width: 16,
            heads: 4,
            time_dim: 8,
            backbone,
            grid: None,
        };
        let mut d = Denoiser::<f64>::new(cfg, 6)?;
        jitter_params(&mut d.params, 7);
        let z = randn(&[2, 8], 24);
        let c = randn(&[2, 8], 25);
        let target = randn(&[2, 8], 26);
        push(
            name,
            param_grad_error(&d.params, 6, |g, store| {
                let zv = g.constant(z.clone());
                let cv = g.constant(c.clone());
                let pred = d.forward_with(g, store, zv, &[3, 70], cv).expect("shapes");
                let tv = g.constant(target.clone());
                ldm_loss_graph(g, tv, pred)
            }),
        );
    }

    let pcfg = ProbeConfig {
        widths: vec![2, 3],
        feature_dim: 4,
        ..ProbeConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = ProbeNet::new(&mut store, &pcfg, &mut seed::rng(2));
    jitter_params(&mut store, 3);
    let faces = probe_faces(2, 2, 16, &std::collections::HashSet::new())?;
    let x = image_batch::<f64>(&faces.iter().map(|f| &f.image).collect::<Vec<_>>());
    let t = Tensor::new(&[2, OUTPUTS], faces.iter().flat_map(|f| f.targets()).collect());
    push(
        "attribute probe",
        param_grad_error(&store, 8, |g, s| {
            let xv = g.constant(x.clone());
            let (_, o) = net.forward(g, s, xv);
            probe_loss(g, o, &t)
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes() {
        for r in module_suite().unwrap() {
            assert!(r.max_rel_error <= REL_TOL, "{}: {:e}", r.module, r.max_rel_error);
        }
    }
}
