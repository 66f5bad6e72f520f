use std::collections::HashSet;

use proptest::prelude::*;

use scldm::autograd::Graph;
use scldm::contrastive::contrastive_loss_value;
use scldm::denoiser::multi_head_attention;
use scldm::diffusion::{
    apply_prior_norm, forward_diffuse, ldm_loss_graph, make_schedule, DiffusionState, ScheduleMode,
};
use scldm::faceprior::{balanced_indices, mean_rows, BalanceRecord, FacePrior};
use scldm::sampler::timesteps;
use scldm::seed::{normal_vec, rng};
use scldm::synthdata::{
    generate_dataset, generate_identity, render_face, spectrogram, synth_speech, DataConfig, Split, StftConfig,
    MIN_RESOLUTION,
};
use scldm::Tensor;

fn randn(shape: &[usize], s: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(&mut rng(s), n))
}

fn prior(values: Vec<f64>) -> FacePrior {
    FacePrior {
        values,
        sample_count: 2,
        encoder_hash: "h".into(),
        balance: BalanceRecord { gender0: 1, gender1: 1 },
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identities_are_valid_and_reproducible(s in any::<u64>()) {
        let a = generate_identity(s);
        prop_assert!(a.is_valid());
        prop_assert_eq!(a, generate_identity(s));
    }

    #[test]
    fn face_pixels_stay_in_range(s in any::<u64>(), res in MIN_RESOLUTION..48) {
        let id = generate_identity(s);
        let f = render_face(&id, id.face_noise_seed(), res).unwrap();
        prop_assert!(f.is_valid());
        prop_assert_eq!(f.resolution, res);
        prop_assert_eq!(f, render_face(&id, id.face_noise_seed(), res).unwrap());
    }

    #[test]
    fn waveforms_have_expected_length_and_range(s in any::<u64>(), ms in 50u32..400, rate in 4000u32..16000) {
        let duration = ms as f64 / 1000.0;
        let id = generate_identity(s);
        let w = synth_speech(&id, duration, rate, id.speech_noise_seed()).unwrap();
        prop_assert_eq!(w.samples.len(), (rate as f64 * duration).round() as usize);
        prop_assert!(w.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn spectrograms_are_nonnegative_with_half_spectrum_bins(s in any::<u64>(), log_fft in 7u32..10) {
        let fft = 1usize << log_fft;
        let cfg = StftConfig { window_length: fft * 3 / 4, hop_length: fft / 4, fft_size: fft };
        let id = generate_identity(s);
        let w = synth_speech(&id, 0.2, 16_000, id.speech_noise_seed()).unwrap();
        let spec = spectrogram(&w, &cfg).unwrap();
        prop_assert_eq!(spec.bins, fft / 2 + 1);
        prop_assert!(spec.magnitudes.iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn contrastive_loss_ignores_common_row_order(s in any::<u64>(), b in 2usize..6, shift in 1usize..5) {
        let (sp, fa) = (randn(&[b, 4], s), randn(&[b, 4], s ^ 1));
        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let reorder = |t: &Tensor<f64>| Tensor::new(&[b, 4], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect());
        let base = contrastive_loss_value(&sp, &fa, 0.1).unwrap();
        let permuted = contrastive_loss_value(&reorder(&sp), &reorder(&fa), 0.1).unwrap();
        prop_assert!(close(base, permuted, 1e-9));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn contrastive_loss_ignores_positive_row_scales(s in any::<u64>(), b in 2usize..6) {
        let (sp, fa) = (randn(&[b, 4], s), randn(&[b, 4], s ^ 2));
        let scales: Vec<f64> = (0..b).map(|i| 0.1 + 3.0 * (i as f64 + 1.0) / b as f64).collect();
        let mut scaled = sp.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            *v *= scales[i / 4];
        }
        let base = contrastive_loss_value(&sp, &fa, 0.2).unwrap();
        prop_assert!(close(base, contrastive_loss_value(&scaled, &fa, 0.2).unwrap(), 1e-9));
    }

    #[test]
    fn prior_mean_is_linear_over_disjoint_sets(s in any::<u64>(), n1 in 1usize..40, n2 in 1usize..40, d in 1usize..8) {
        let a = randn(&[n1, d], s);
        let b = randn(&[n2, d], s ^ 3);
        let both = Tensor::new(&[n1 + n2, d], a.data().iter().chain(b.data()).copied().collect());
        let (ma, mb, mu) = (mean_rows(&a).unwrap(), mean_rows(&b).unwrap(), mean_rows(&both).unwrap());
        for k in 0..d {
            let weighted = (n1 as f64 * ma[k] + n2 as f64 * mb[k]) / (n1 + n2) as f64;
            prop_assert!(close(mu[k], weighted, 1e-6));
        }
    }

    #[test]
    fn balanced_draws_split_genders_evenly(s in any::<u64>(), n in 2usize..60) {
        let genders: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let idx = balanced_indices(&genders, n, s).unwrap();
        let ones = idx.iter().filter(|&&i| genders[i] == 1).count();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(ones.abs_diff(n - ones) <= 1);
        prop_assert_eq!(idx.iter().collect::<HashSet<_>>().len(), n);
    }

    #[test]
    fn forward_diffusion_is_linear(s in any::<u64>(), t in 1usize..100, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let sched = make_schedule(100, ScheduleMode::VariancePreserving).unwrap();
        let (z1, z2, e1, e2) = (randn(&[2, 3], s), randn(&[2, 3], s ^ 4), randn(&[2, 3], s ^ 5), randn(&[2, 3], s ^ 6));
        let mix = |x: &Tensor<f64>, y: &Tensor<f64>| {
            Tensor::new(&[2, 3], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect())
        };
        let ts = [t, t];
        let lhs = forward_diffuse(&mix(&z1, &z2), &ts, &mix(&e1, &e2), &sched).unwrap();
        let rhs = mix(
            &forward_diffuse(&z1, &ts, &e1, &sched).unwrap(),
            &forward_diffuse(&z2, &ts, &e2, &sched).unwrap(),
        );
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn prior_shift_commutes_with_translation(s in any::<u64>(), beta in 0.0f64..1.0, c in -5.0f64..5.0) {
        let p = prior(vec![1.0, -2.0, 0.5]);
        let z = randn(&[4, 3], s);
        let moved = Tensor::new(&[4, 3], z.data().iter().map(|v| v + c).collect());
        let shift_then_move = apply_prior_norm(DiffusionState::new(z, 5), &p, beta).unwrap().latent;
        let shift_then_move = Tensor::new(&[4, 3], shift_then_move.data().iter().map(|v| v + c).collect());
        let move_then_shift = apply_prior_norm(DiffusionState::new(moved, 5), &p, beta).unwrap().latent;
        prop_assert!(shift_then_move.max_abs_diff(&move_then_shift) < 1e-12);
    }

    #[test]
    fn schedule_coefficients_are_monotone(steps in 2usize..400, literal in any::<bool>()) {
        let mode = if literal { ScheduleMode::PaperLiteral } else { ScheduleMode::VariancePreserving };
        let sched = make_schedule(steps, mode).unwrap();
        prop_assert!(sched.betas.iter().all(|b| 0.0 < *b && *b < 1.0));
        prop_assert!(sched.betas.windows(2).all(|w| w[0] <= w[1]));
        for t in 1..=steps {
            let (s0, n0) = sched.coefficients(t - 1);
            let (s1, n1) = sched.coefficients(t);
            prop_assert!(s1 <= s0 && n1 >= n0);
        }
    }

    #[test]
    fn denoising_loss_gradient_has_closed_form(s in any::<u64>(), b in 1usize..5, d in 1usize..9) {
        let (truth, pred) = (randn(&[b, d], s), randn(&[b, d], s ^ 7));
        let mut g = Graph::new();
        let tv = g.constant(truth.clone());
        let pv = g.input(pred.clone());
        let loss = ldm_loss_graph(&mut g, tv, pv);
        let grads = g.backward(loss);
        let grad = grads.get(pv).unwrap();
        let n = (b * d) as f64;
        for ((gv, p), t) in grad.data().iter().zip(pred.data()).zip(truth.data()) {
            prop_assert!(close(*gv, 2.0 * (p - t) / n, 1e-6));
        }
    }

    #[test]
    fn attention_rows_are_probability_vectors(s in any::<u64>(), n in 1usize..6, m in 1usize..6, heads in 1usize..4) {
        let c = heads * 2;
        let mut g = Graph::new();
        let q = g.constant(randn(&[2, n, c], s).map(|v| 3.0 * v));
        let k = g.constant(randn(&[2, m, c], s ^ 8));
        let v = g.constant(randn(&[2, m, c], s ^ 9));
        let (_, w) = multi_head_attention(&mut g, q, k, v, heads);
        for row in g.value(w).data().chunks(m) {
            prop_assert!(row.iter().all(|x| *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn sampling_timesteps_descend_to_zero(chain in 1usize..1000, steps in 1usize..200) {
        let steps = steps.min(chain);
        let ts = timesteps(chain, steps);
        prop_assert_eq!(ts.len(), steps + 1);
        prop_assert_eq!(ts[0], chain);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn dataset_splits_are_disjoint_and_balanced(s in any::<u64>()) {
        let cfg = DataConfig {
            train: 40,
            val: 20,
            test: 20,
            seed: s,
            resolution: MIN_RESOLUTION,
            duration: 0.05,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let items = ds.split(split);
            let ones = items.iter().filter(|p| p.identity.gender == 1).count() as f64;
            let ratio = ones / items.len() as f64;
            prop_assert!((0.45..=0.55).contains(&ratio), "{split:?} gender ratio {ratio}");
            for p in items {
                prop_assert!(seen.insert(p.identity.id_seed));
                prop_assert_eq!(p.identity, generate_identity(p.identity.id_seed));
            }
        }
    }
}
