//! Property tests for the stated invariants.

mod common;

use proptest::prelude::*;
use uniuir::checkpoint::{decode, encode, CheckpointMeta, StageTag};
use uniuir::config::RunConfig;
use uniuir::depth::{downsample_depth, normalize_depth, DepthProviderSpec};
use uniuir::image::{DepthProvenance, DepthRaster, ImagePlane, PriorKind, PriorVector, ValueDomain};
use uniuir::lcdm::{make_schedule, q_sample, reverse_update};
use uniuir::losses::{depth_l1, grad_loss, l1_loss};
use uniuir::metrics::{psnr, ssim};
use uniuir::padding::{crop, pad_to_multiple};
use uniuir::rng::seed_all;
use uniuir::spectral::{fft_split, ifft_merge};
use uniuir::trainer::{cosine_lr, epoch_batch, restore_image, Models};
use uniuir::wmoe::route;
use uniuir::{autograd::Graph, Tensor};

fn plane(h: usize, w: usize, c: usize, vals: &[f64]) -> ImagePlane<f64> {
    ImagePlane::from_fn(h, w, c, ValueDomain::UnitInterval, |i| vals[i % vals.len()]).unwrap()
}

fn depth(h: usize, w: usize, vals: &[f64]) -> DepthRaster<f64> {
    let t = Tensor::from_fn(&[h, w], |i| vals[i % vals.len()]);
    DepthRaster::new(t, DepthProvenance::External).unwrap()
}

fn unit_vals() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_crop_round_trip(h in 1usize..40, w in 1usize..40, m in prop::sample::select(vec![8usize, 16]), vals in unit_vals()) {
        let x = plane(h, w, 3, &vals);
        let (p, rec) = pad_to_multiple(&x, m).unwrap();
        prop_assert_eq!(p.height() % m, 0);
        prop_assert_eq!(p.width() % m, 0);
        prop_assert!(p.height() - h < m && p.width() - w < m);
        prop_assert_eq!(crop(&p, &rec).unwrap(), x);
    }

    #[test]
    fn route_is_a_distribution_with_k_distinct_picks(logits in prop::collection::vec(-5.0f64..5.0, 1..8), kf in 0.0f64..1.0) {
        let k = 1 + ((logits.len() - 1) as f64 * kf) as usize;
        let (w, sel) = route(&logits, k).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v > 0.0));
        let mut s = sel.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), k);
        let floor = sel.iter().map(|&i| w[i]).fold(f64::MAX, f64::min);
        prop_assert!((0..w.len()).filter(|i| !sel.contains(i)).all(|j| w[j] <= floor));
    }

    #[test]
    fn schedule_is_decreasing(a1 in 0.5f64..0.999, frac in 0.01f64..0.99, t in 1usize..12) {
        let mut cfg = RunConfig::default();
        cfg.alpha_1 = a1;
        cfg.alpha_t = a1 * frac;
        cfg.diffusion_steps = t;
        let s = make_schedule(&cfg).unwrap();
        prop_assert_eq!(s.steps(), t);
        for i in 1..t {
            prop_assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            prop_assert!(s.alpha[i] <= s.alpha[i - 1]);
        }
        prop_assert!(s.alpha_bar.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_step_reverse_inverts_forward(z in prop::collection::vec(-3.0f64..3.0, 1..16), seed in any::<u64>()) {
        let s = make_schedule(&RunConfig::default()).unwrap();
        let n = z.len();
        let eps = common::randn(&[n], 1.0, seed);
        let zt = q_sample(&PriorVector::new(z.clone(), PriorKind::Prior).unwrap(), 1, eps.data(), &s).unwrap();
        let mut g = Graph::detached();
        let ztv = g.constant(Tensor::new(vec![1, n], zt.values().to_vec()).unwrap());
        let ev = g.constant(eps.reshape(&[1, n]).unwrap());
        let back = reverse_update(&mut g, ztv, ev, 1, &s, None);
        for (a, b) in g.value(back).data().iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(va in unit_vals(), vb in unit_vals()) {
        let (a, b) = (plane(12, 13, 3, &va), plane(12, 13, 3, &vb));
        let (p1, p2) = (psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!(p1 == p2 || (p1 - p2).abs() < 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn normalized_depth_spans_unit_interval(h in 1usize..10, w in 1usize..10, vals in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let raw = Tensor::from_fn(&[h, w], |i| vals[i % vals.len()]);
        let d = normalize_depth(&raw).unwrap();
        let data = d.tensor().data();
        prop_assert!(data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if raw.max_value() > raw.min_value() {
            prop_assert_eq!(d.tensor().min_value(), 0.0);
            prop_assert!((d.tensor().max_value() - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(data.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn downsampling_keeps_the_mean(hb in 1usize..4, wb in 1usize..4, level in 0usize..=3, vals in unit_vals()) {
        let (h, w) = (hb << level, wb << level);
        let d = depth(h, w, &vals);
        let small = downsample_depth(&d, level).unwrap();
        prop_assert_eq!((small.height(), small.width()), (hb, wb));
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.len() as f64;
        prop_assert!((mean(d.tensor()) - mean(small.tensor())).abs() < 1e-12);
    }

    #[test]
    fn fft_round_trip(h in 1usize..20, w in 1usize..20, vals in prop::collection::vec(-2.0f64..2.0, 1..50)) {
        let x = ImagePlane::feature(Tensor::from_fn(&[h, w, 2], |i| vals[i % vals.len()])).unwrap();
        let s = fft_split(&x).unwrap();
        prop_assert!(s.amplitude.data().iter().all(|&a| a >= 0.0));
        let back = ifft_merge(&s).unwrap();
        for (a, b) in back.tensor().data().iter().zip(x.tensor().data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..6), iteration in any::<u64>(), seed in any::<u64>()) {
        let params: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}.w"), common::randn(s, 1.0, seed.wrapping_add(i as u64))))
            .collect();
        let meta = CheckpointMeta { config: Some(RunConfig::tiny()), stage: StageTag::StageI, iteration, rng: None };
        let (back, m2) = decode::<f64>(&encode(&params, &meta).unwrap()).unwrap();
        prop_assert_eq!(back, params);
        prop_assert_eq!(m2.iteration, iteration);
        prop_assert_eq!(m2.stage, StageTag::StageI);
        prop_assert_eq!(m2.config, Some(RunConfig::tiny()));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..64) {
        let params = vec![("a".to_string(), common::randn(&[3, 2], 1.0, 1))];
        let bytes = encode(&params, &CheckpointMeta::default()).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode::<f64>(&bytes[..cut]).is_err());
    }

    #[test]
    fn config_text_round_trip(k in 1usize..4, extra in 0usize..3, t in 1usize..9, seed in any::<u64>(), lr in 1e-6f64..1e-2) {
        let mut cfg = RunConfig::tiny();
        cfg.num_experts = k + extra;
        cfg.top_k = k;
        cfg.diffusion_steps = t;
        cfg.seed = seed;
        cfg.lr_init = lr;
        cfg.lr_final = lr / 10.0;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_broken_values(n in 1usize..5, over in 1usize..3, a1 in 0.1f64..0.99) {
        let mut cfg = RunConfig::default();
        cfg.num_experts = n;
        cfg.top_k = n + over;
        prop_assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.alpha_1 = a1;
        cfg.alpha_t = a1 + 0.001;
        prop_assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.diffusion_steps = 0;
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_lr_decays_monotonically(total in 1usize..500, lr0 in 1e-5f64..1e-2, frac in 0.0f64..1.0) {
        let lr1 = lr0 * frac;
        prop_assert!((cosine_lr(0, total, lr0, lr1) - lr0).abs() <= 1e-15 * lr0);
        let mut prev = f64::INFINITY;
        for i in 0..=total + 2 {
            let lr = cosine_lr(i, total, lr0, lr1);
            prop_assert!(lr <= prev + 1e-18 && lr >= lr1 - 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn epoch_batches_cover_each_pair_once(seed in any::<u64>(), n in 1usize..30, bf in 0.0f64..1.0, epoch in 0u64..5) {
        let batch = 1 + ((n - 1) as f64 * bf) as usize;
        let per = (n / batch) as u64;
        let mut seen = Vec::new();
        for i in epoch * per..(epoch + 1) * per {
            let b = epoch_batch(seed, i, n, batch).unwrap();
            prop_assert_eq!(b.len(), batch);
            seen.extend(b);
        }
        let mut s = seen.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), seen.len());
        prop_assert!(seen.iter().all(|&i| i < n));
    }

    #[test]
    fn losses_are_non_negative(va in unit_vals(), vb in unit_vals()) {
        let (a, b) = (plane(6, 7, 3, &va), plane(6, 7, 3, &vb));
        prop_assert!(l1_loss(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let (da, db) = (depth(6, 7, &va), depth(6, 7, &vb));
        prop_assert!(grad_loss(&da, &db).unwrap() >= 0.0);
        prop_assert!(depth_l1(&da, &db).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_loss_ignores_constant_offsets(va in prop::collection::vec(0.0f64..0.5, 1..40), shift in 0.0f64..0.5) {
        let a = depth(5, 6, &va);
        let shifted: Vec<f64> = va.iter().map(|v| v + shift).collect();
        let b = depth(5, 6, &shifted);
        prop_assert!(grad_loss(&a, &b).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn restored_images_stay_in_unit_range(h in 4usize..20, w in 4usize..20, seed in any::<u64>(), vals in unit_vals()) {
        let mut m = Models::<f64>::new(&RunConfig::tiny()).unwrap();
        // push the model away from the identity
        let noisy: Vec<(String, Tensor<f64>)> = m
            .named_params()
            .into_iter()
            .enumerate()
            .map(|(i, (n, t))| {
                let noise = common::randn(t.shape(), 0.5, seed.wrapping_add(i as u64));
                (n, Tensor::from_fn(t.shape(), |j| t.data()[j] + noise.data()[j]))
            })
            .collect();
        m.load_params(&noisy).unwrap();
        let x = plane(h, w, 3, &vals);
        let y = restore_image(&m, &x, None, &DepthProviderSpec::stub(), &mut seed_all(seed), None).unwrap();
        prop_assert_eq!(y.tensor().shape(), x.tensor().shape());
        prop_assert!(y.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
