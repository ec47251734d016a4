//! One check per acceptance criterion, shared by the focused suites and the
//! acceptance runner. Each check returns an [`Outcome`] instead of panicking.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniuir::autograd::{Graph, Var};
use uniuir::backbone::{DepthGate, Mmoeb, PriorModulation};
use uniuir::config::RunConfig;
use uniuir::depth::stub_depth_graph;
use uniuir::image::{ImagePlane, PriorKind, PriorVector, ValueDomain};
use uniuir::lcdm::{make_schedule, q_sample, reverse_update, sample, Denoiser};
use uniuir::losses::{grad_graph, l1_graph, mse_graph, stage1_objective, stage2_objective};
use uniuir::metrics;
use uniuir::nn::{Builder, Conv2d, ParamId, ParamStore};
use uniuir::padding::{crop, pad_to_multiple};
use uniuir::rng::seed_all;
use uniuir::sfpg::Sfpg;
use uniuir::spectral::{fft_split, ifft_merge};
use uniuir::trainer::{epoch_batch, paired_prior, restore_image, restore_with_prior, Models, TrainPair, Trainer};
use uniuir::vssm::Vssm;
use uniuir::wmoe::{expert_width, route, ExpertHistogram, MoeMode, Wmoe};
use uniuir::{synth, Tensor};

use super::{fd_check, randn, uniform, FdReport, FD_REL_TOL};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }

    pub fn all(parts: Vec<(String, Outcome)>) -> Self {
        let failed: Vec<String> = parts
            .iter()
            .filter(|(_, o)| !o.passed)
            .map(|(n, o)| format!("{n}: {}", o.detail))
            .collect();
        if failed.is_empty() {
            Self::new(true, parts.iter().map(|(n, o)| format!("{n} ({})", o.detail)).collect::<Vec<_>>().join(", "))
        } else {
            Self::new(false, failed.join("; "))
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criterion 1

/// Small config for the gradient suite: 4-channel features, Ĉ = 8.
pub fn grad_config() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.stage_widths = vec![4, 8, 16, 32];
    cfg.prior_dim = 8;
    cfg.num_prompts = 3;
    cfg.ssm_state = 3;
    cfg.ssm_expand = 1;
    cfg
}

const GRAD_PROBES: usize = 4;

/// Builds a module into a fresh f64 store, adds `inputs` as parameters and
/// checks every parameter.
fn module_fd<M>(
    build: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> M,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&M, &mut Graph<'_, f64>, &[Var]) -> Var,
) -> FdReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = build(&mut Builder::new(&mut store, &mut rng));
    let input_ids: Vec<ParamId> = inputs.into_iter().enumerate().map(|(i, t)| store.insert(&format!("input{i}"), t)).collect();
    // zero-initialized heads would hide upstream gradients
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            *store.get_mut(id) = randn(store.get(id).shape(), 0.3, 100 + id.index() as u64);
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    let input_ids2 = input_ids.clone();
    fd_check(&mut store, &ids, GRAD_PROBES, move |g| {
        let vars: Vec<Var> = input_ids2.iter().map(|&id| g.param(id)).collect();
        f(&m, g, &vars)
    })
}

fn fd_outcome(r: FdReport) -> Outcome {
    Outcome::new(r.passed(), format!("worst rel {:.1e} over {} probes ({})", r.worst_rel, r.checked, r.worst_at))
}

pub fn grad_sfpg() -> Outcome {
    let cfg = grad_config();
    let x = uniform(&[1, 4, 4, 6], 0.0, 1.0, 21);
    fd_outcome(module_fd(|b| Sfpg::paired(b, "sfpg", &cfg), vec![x], |m, g, v| m.forward(g, v[0]).z))
}

pub fn grad_sfpg_star() -> Outcome {
    let cfg = grad_config();
    let x = uniform(&[1, 4, 4, 3], 0.0, 1.0, 22);
    fd_outcome(module_fd(|b| Sfpg::star(b, "sfpg_star", &cfg), vec![x], |m, g, v| m.forward(g, v[0]).z))
}

pub fn grad_vssm() -> Outcome {
    let x = randn(&[1, 4, 4, 4], 1.0, 23);
    fd_outcome(module_fd(|b| Vssm::new(b, "vssm", 4, 1, 3), vec![x], |m, g, v| m.forward(g, v[0])))
}

pub fn grad_wmoe() -> Outcome {
    let mut parts = Vec::new();
    for (mode, k) in [(MoeMode::Train, 2), (MoeMode::Infer, 2), (MoeMode::Infer, 1)] {
        let x = randn(&[2, 4, 4, 4], 1.0, 24);
        let r = module_fd(|b| Wmoe::new(b, "wmoe", 4, 3), vec![x], move |m, g, v| m.forward(g, v[0], mode, k).out);
        parts.push((format!("{mode:?}/k={k}"), fd_outcome(r)));
    }
    Outcome::all(parts)
}

pub fn grad_depth_gate() -> Outcome {
    let x = randn(&[1, 4, 4, 4], 1.0, 25);
    let d = uniform(&[1, 4, 4, 1], 0.0, 1.0, 26);
    fd_outcome(module_fd(
        |b| DepthGate { conv: Conv2d::new(b, "depth_conv", 1, 4, 3, 1, true) },
        vec![x, d],
        |m, g, v| m.forward(g, v[0], v[1]),
    ))
}

pub fn grad_prior_modulate() -> Outcome {
    let x = randn(&[2, 4, 4, 4], 1.0, 27);
    let z = randn(&[2, 8], 1.0, 28);
    fd_outcome(module_fd(|b| PriorModulation::new(b, "mod", 8, 4), vec![x, z], |m, g, v| m.forward(g, v[0], v[1])))
}

pub fn grad_mmoeb() -> Outcome {
    let cfg = grad_config();
    let x = randn(&[1, 4, 4, 4], 1.0, 29);
    let z = randn(&[1, 8], 1.0, 30);
    let d = uniform(&[1, 4, 4, 1], 0.0, 1.0, 31);
    fd_outcome(module_fd(|b| Mmoeb::new(b, "blk", 4, &cfg), vec![x, z, d], |m, g, v| {
        m.forward(g, v[0], v[1], v[2], MoeMode::Train, 2, None)
    }))
}

pub fn grad_denoiser() -> Outcome {
    let mut parts = Vec::new();
    for t in 1..=4 {
        let z = randn(&[2, 8], 1.0, 32);
        let c = randn(&[2, 8], 1.0, 33);
        let r = module_fd(|b| Denoiser::new(b, "den", 8), vec![z, c], move |m, g, v| m.forward(g, v[0], v[1], t));
        parts.push((format!("t={t}"), fd_outcome(r)));
    }
    Outcome::all(parts)
}

pub fn grad_losses() -> Outcome {
    let cfg = grad_config();
    let a = uniform(&[2, 4, 4, 3], 0.0, 1.0, 34);
    let b = uniform(&[2, 4, 4, 3], 0.0, 1.0, 35);
    let da = uniform(&[2, 4, 4, 1], 0.0, 1.0, 36);
    let db = uniform(&[2, 4, 4, 1], 0.0, 1.0, 37);
    let z = randn(&[2, 8], 1.0, 38);
    let zh = randn(&[2, 8], 1.0, 39);
    let run = |inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var| {
        fd_outcome(module_fd(|_| (), inputs, |_, g, v| f(g, v)))
    };
    let c1 = cfg.clone();
    let c2 = cfg.clone();
    Outcome::all(vec![
        ("l1".into(), run(vec![a.clone(), b.clone()], &|g, v| l1_graph(g, v[0], v[1]))),
        ("mse".into(), run(vec![a.clone(), b.clone()], &|g, v| mse_graph(g, v[0], v[1]))),
        ("grad".into(), run(vec![da.clone(), db.clone()], &|g, v| grad_graph(g, v[0], v[1]))),
        ("stub depth".into(), run(vec![a.clone()], &|g, v| stub_depth_graph(g, v[0]))),
        (
            "stage I".into(),
            run(vec![a.clone(), b.clone(), da.clone()], &move |g, v| {
                let d_hq = stub_depth_graph(g, v[0]);
                stage1_objective(g, v[0], v[1], v[2], d_hq, &c1).0
            }),
        ),
        (
            "stage II".into(),
            run(vec![a, b, z.clone(), zh.clone(), zh, z], &move |g, v| {
                stage2_objective(g, v[0], v[1], v[2], v[3], Some((v[4], v[5])), &c2).0
            }),
        ),
    ])
}

pub fn criterion1() -> Outcome {
    let start = Instant::now();
    let mut parts: Vec<(String, Outcome)> = vec![
        ("SFPG".into(), grad_sfpg()),
        ("SFPG*".into(), grad_sfpg_star()),
        ("VSSM".into(), grad_vssm()),
        ("W-MoE".into(), grad_wmoe()),
        ("depth_gate".into(), grad_depth_gate()),
        ("prior_modulate".into(), grad_prior_modulate()),
        ("MMoEB".into(), grad_mmoeb()),
        ("denoiser".into(), grad_denoiser()),
        ("losses".into(), grad_losses()),
    ];
    let elapsed = start.elapsed();
    parts.push((
        "runtime".into(),
        Outcome::new(elapsed < Duration::from_secs(120), format!("{:.1}s", elapsed.as_secs_f64())),
    ));
    let names: Vec<String> = parts.iter().map(|(n, _)| n.clone()).filter(|n| n != "runtime").collect();
    let mut o = Outcome::all(parts);
    if o.passed {
        o.detail = format!("rel tol {FD_REL_TOL:.0e} met in {:.1}s by {}", elapsed.as_secs_f64(), names.join(", "));
    }
    o
}

// ---------------------------------------------------------------- criterion 2

pub const SPECTRAL_SIZES: [(usize, usize); 9] = [(1, 1), (1, 5), (2, 3), (4, 4), (5, 7), (8, 8), (16, 12), (31, 17), (32, 32)];

/// Direct `O(N²)` DFT of each channel, `(re, im)` in `[h, w, c]` order.
pub fn naive_dft(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut re, mut im) = (vec![0.0; h * w * c], vec![0.0; h * w * c]);
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let val = x[(y * w + xx) * c + ch];
                        sr += val * ang.cos();
                        si += val * ang.sin();
                    }
                }
                re[(u * w + v) * c + ch] = sr;
                im[(u * w + v) * c + ch] = si;
            }
        }
    }
    (re, im)
}

pub fn criterion2() -> Outcome {
    let (mut worst_dft, mut worst_inv, mut worst_parseval) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &(h, w)) in SPECTRAL_SIZES.iter().enumerate() {
        let x = uniform(&[h, w, 2], -1.0, 1.0, 200 + i as u64);
        let img = ImagePlane::feature(x.clone()).unwrap();
        let s = fft_split(&img).unwrap();
        let (re, im) = naive_dft(x.data(), h, w, 2);
        let (amp, ph) = (s.amplitude.data(), s.phase.data());
        for j in 0..re.len() {
            worst_dft = worst_dft.max((amp[j] * ph[j].cos() - re[j]).abs()).max((amp[j] * ph[j].sin() - im[j]).abs());
        }
        let back = ifft_merge(&s).unwrap();
        worst_inv = worst_inv.max(max_abs_diff(back.tensor().data(), x.data()));
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = amp.iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        worst_parseval = worst_parseval.max((spatial - spectral).abs() / spatial);
    }
    Outcome::all(vec![
        ("vs naive DFT".into(), Outcome::new(worst_dft <= 1e-6, format!("{worst_dft:.1e}"))),
        ("round trip".into(), Outcome::new(worst_inv <= 1e-6, format!("{worst_inv:.1e}"))),
        ("Parseval".into(), Outcome::new(worst_parseval <= 1e-9, format!("{worst_parseval:.1e}"))),
    ])
    .with_detail(format!("max err {worst_dft:.1e} / {worst_inv:.1e} / {worst_parseval:.1e} on sizes up to 32x32"))
}

impl Outcome {
    fn with_detail_always(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }

    fn with_detail(mut self, detail: String) -> Self {
        if self.passed {
            self.detail = detail;
        }
        self
    }
}

// ---------------------------------------------------------------- criterion 3

pub fn moe_dense_sparse() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Wmoe::new(&mut Builder::new(&mut store, &mut rng), "wmoe", 4, 3);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = randn(&[2, 4, 4, 4], 1.0, 300 + seed);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x);
        let dense = m.forward(&mut g, xv, MoeMode::Train, 3).out;
        let sparse = m.forward(&mut g, xv, MoeMode::Infer, 3).out;
        worst = worst.max(max_abs_diff(g.value(dense).data(), g.value(sparse).data()));
    }
    Outcome::new(worst <= 1e-9, format!("max diff {worst:.1e}"))
}

pub fn moe_widths() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Wmoe::new(&mut Builder::new(&mut store, &mut rng), "wmoe", 8, 3);
    let widths: Vec<usize> = m.experts.iter().map(|e| e.low_rank()).collect();
    let ok = widths == [4, 8, 16] && (1..=3).map(expert_width).collect::<Vec<_>>() == [4, 8, 16];
    Outcome::new(ok, format!("widths {widths:?}"))
}

/// Top-k contract over random (often tied) logits.
pub fn moe_routing_trials(trials: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..trials {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=n);
        // coarse values make ties common
        let logits: Vec<f64> = (0..n).map(|_| (rng.random_range(-2.0..2.0f64) * 2.0).round() / 2.0).collect();
        let (w, sel) = route(&logits, k).unwrap();
        let sum: f64 = w.iter().sum();
        let mut fail = None;
        if (sum - 1.0).abs() > 1e-12 || w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            fail = Some("weights are not a probability vector");
        }
        let mut seen = sel.clone();
        seen.sort_unstable();
        seen.dedup();
        if sel.len() != k || seen.len() != k {
            fail = Some("selection size");
        }
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                if w[j] > w[i] || (w[j] == w[i] && j < i) {
                    fail = Some("selection not ordered strongest first, lower index on ties");
                }
            }
            for j in (0..n).filter(|j| !sel.contains(j)) {
                if w[j] > w[i] || (w[j] == w[i] && j < i) {
                    fail = Some("an unselected expert outranks a selected one");
                }
            }
        }
        if let Some(f) = fail {
            return Outcome::new(false, format!("trial {trial}: {f} (logits {logits:?}, k {k}, picked {sel:?})"));
        }
    }
    Outcome::new(true, format!("{trials} trials"))
}

pub fn criterion3() -> Outcome {
    Outcome::all(vec![
        ("k=N dense/sparse".into(), moe_dense_sparse()),
        ("C_l = 4, 8, 16".into(), moe_widths()),
        ("routing invariants".into(), moe_routing_trials(1000)),
    ])
}

// ---------------------------------------------------------------- criterion 4

pub fn diffusion_schedule() -> Outcome {
    let cfg = RunConfig::default();
    let s = make_schedule(&cfg).unwrap();
    let endpoints = s.steps() == 4 && s.alpha[0] == 0.99 && s.alpha[3] == 0.1;
    let recurrence = (1..s.steps()).all(|t| s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t]) && s.alpha_bar[0] == s.alpha[0];
    // independent recomputation from the linspace values
    let oracle: f64 = (0..4).map(|i| 0.99 + (0.1 - 0.99) * i as f64 / 3.0).product();
    let ab = s.alpha_bar[3];
    let matches = (ab - oracle).abs() <= 1e-12 && (oracle - 0.0272).abs() < 5e-5;
    Outcome::all(vec![
        ("endpoints".into(), Outcome::new(endpoints, format!("{:?}", s.alpha))),
        ("recurrence".into(), Outcome::new(recurrence, if recurrence { "exact" } else { "not exact" })),
        ("alpha_bar_T".into(), Outcome::new(matches, format!("{ab:.6} vs oracle {oracle:.6}"))),
    ])
    .with_detail(format!("alpha {:?}, alpha_bar_T {ab:.6} (oracle {oracle:.6})", s.alpha))
}

pub fn diffusion_inversion() -> Outcome {
    let s = make_schedule(&RunConfig::default()).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let z = randn(&[1, 16], 1.0, 400 + seed);
        let eps = randn(&[1, 16], 1.0, 500 + seed);
        let zt = q_sample(&PriorVector::new(z.data().to_vec(), PriorKind::Prior).unwrap(), 1, eps.data(), &s).unwrap();
        let mut g = Graph::detached();
        let (ztv, ev) = (g.constant(Tensor::new(vec![1, 16], zt.values().to_vec()).unwrap()), g.constant(eps));
        let noise = g.constant(randn(&[1, 16], 1.0, 600 + seed));
        let back = reverse_update(&mut g, ztv, ev, 1, &s, Some(noise));
        worst = worst.max(max_abs_diff(g.value(back).data(), z.data()));
    }
    Outcome::new(worst <= 1e-9, format!("max err {worst:.1e}"))
}

pub fn diffusion_evaluations() -> Outcome {
    let mut results = Vec::new();
    for t in [1usize, 4, 8] {
        let mut cfg = grad_config();
        cfg.diffusion_steps = t;
        let m = Models::<f64>::new(&cfg).unwrap();
        let c = PriorVector::new(vec![0.1; cfg.prior_dim], PriorKind::Condition).unwrap();
        let before = m.denoiser.evaluations();
        sample(&m.store, &m.denoiser, &c, &m.schedule, &mut seed_all(1)).unwrap();
        results.push((t, m.denoiser.evaluations() - before));
    }
    Outcome::new(results.iter().all(|(t, n)| t == n), format!("(T, evaluations) {results:?}"))
}

pub fn criterion4() -> Outcome {
    Outcome::all(vec![
        ("schedule".into(), diffusion_schedule()),
        ("t=1 inversion".into(), diffusion_inversion()),
        ("T evaluations".into(), diffusion_evaluations()),
    ])
}

// ---------------------------------------------------------------- criterion 5

pub const IDENTITY_SIZES: [(usize, usize); 3] = [(8, 8), (13, 21), (32, 24)];

pub fn identity_at_init() -> Outcome {
    let m = Models::<f64>::new(&RunConfig::tiny()).unwrap();
    let mut worst = 0.0f64;
    let mut rng = seed_all(9);
    for &(h, w) in &IDENTITY_SIZES {
        let x = synth::scene::<f64, _>(h, w, &mut rng).unwrap();
        let y = restore_image(&m, &x, None, &uniuir::depth::DepthProviderSpec::stub(), &mut rng, None).unwrap();
        if y.tensor().shape() != x.tensor().shape() {
            return Outcome::new(false, format!("{h}x{w}: output shape {:?}", y.tensor().shape()));
        }
        worst = worst.max(max_abs_diff(y.tensor().data(), x.tensor().data()));
    }
    Outcome::new(worst <= 1e-9, format!("max |restore(x) - x| {worst:.1e}"))
}

pub fn padding_round_trip() -> Outcome {
    for h in 1..=33 {
        for w in 1..=33 {
            let x = ImagePlane::from_fn(h, w, 3, ValueDomain::UnitInterval, |i| ((i * 7919) % 256) as f64 / 255.0).unwrap();
            for m in [8, 16] {
                let (p, rec) = pad_to_multiple(&x, m).unwrap();
                if p.height() % m != 0 || p.width() % m != 0 || crop(&p, &rec).unwrap() != x {
                    return Outcome::new(false, format!("{h}x{w} multiple {m}"));
                }
            }
        }
    }
    Outcome::new(true, "sizes 1..33 x 1..33, multiples 8 and 16")
}

pub fn criterion5() -> Outcome {
    Outcome::all(vec![("identity".into(), identity_at_init()), ("padding".into(), padding_round_trip())])
}

// ---------------------------------------------------------------- criterion 6

pub const OVERFIT_MAX_STAGE1: u64 = 2000;
pub const OVERFIT_CHECK_EVERY: u64 = 50;
pub const OVERFIT_STAGE2: u64 = 500;
pub const OVERFIT_L1: f64 = 0.02;
pub const OVERFIT_PSNR: f64 = 30.0;
pub const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Two 64×64 synthetic pairs (clean scene vs colour cast + blur).
pub fn overfit_pairs() -> Vec<TrainPair<f32>> {
    let mut rng = seed_all(2024);
    (0..2)
        .map(|_| {
            let gt = synth::scene::<f32, _>(64, 64, &mut rng).unwrap();
            TrainPair::new(synth::underwater(&gt).unwrap(), gt)
        })
        .collect()
}

/// Train-set L1 and PSNR of the stage I model (paired prior, dense experts).
pub fn stage1_fit(models: &Models<f32>, pairs: &[TrainPair<f32>]) -> (f64, f64) {
    let (mut l1, mut se, mut n) = (0.0, 0.0, 0usize);
    for p in pairs {
        let z = paired_prior(models, &p.lq, &p.gt).unwrap();
        let y = restore_with_prior(models, &p.lq, &z, MoeMode::Train, None).unwrap();
        for (a, b) in y.tensor().data().iter().zip(p.gt.tensor().data()) {
            let d = (*a as f64) - (*b as f64);
            l1 += d.abs();
            se += d * d;
            n += 1;
        }
    }
    (l1 / n as f64, 10.0 * (1.0 / (se / n as f64)).log10())
}

pub struct OverfitRun {
    pub outcome: Outcome,
    pub trainer: Option<Trainer<f32>>,
}

pub fn criterion6() -> OverfitRun {
    let start = Instant::now();
    let cfg = RunConfig::tiny();
    let pairs = overfit_pairs();
    let spec = uniuir::depth::DepthProviderSpec::stub();
    let mut t = match Trainer::<f32>::new(&cfg, spec) {
        Ok(t) => t,
        Err(e) => return OverfitRun { outcome: Outcome::new(false, e.to_string()), trainer: None },
    };
    let step = |t: &mut Trainer<f32>| -> Result<uniuir::losses::LossReport, String> {
        let idx = epoch_batch(cfg.seed, t.state.iteration, pairs.len(), cfg.batch).map_err(|e| e.to_string())?;
        let b = t.make_batch(&pairs, &idx).map_err(|e| e.to_string())?;
        t.step(&b).map_err(|e| e.to_string())
    };
    let mut fit = (f64::INFINITY, 0.0);
    let mut reached = None;
    while t.state.iteration < OVERFIT_MAX_STAGE1 {
        if let Err(e) = step(&mut t) {
            return OverfitRun { outcome: Outcome::new(false, format!("stage I: {e}")), trainer: None };
        }
        if t.state.iteration % OVERFIT_CHECK_EVERY == 0 {
            fit = stage1_fit(&t.models, &pairs);
            if fit.0 < OVERFIT_L1 && fit.1 > OVERFIT_PSNR {
                reached = Some(t.state.iteration);
                break;
            }
        }
    }
    let stage1_secs = start.elapsed().as_secs_f64();
    let stage1 = Outcome::new(
        reached.is_some(),
        format!("L1 {:.4}, PSNR {:.2} dB after {} iterations", fit.0, fit.1, t.state.iteration),
    );
    let mut t = match t.into_stage2() {
        Ok(t) => t,
        Err(e) => return OverfitRun { outcome: Outcome::new(false, e.to_string()), trainer: None },
    };
    let sfpg_before: Vec<Tensor<f32>> = sfpg_params(&t.models);
    let mut diffs = Vec::with_capacity(OVERFIT_STAGE2 as usize);
    let mut finite = true;
    while t.state.iteration < OVERFIT_STAGE2 {
        match step(&mut t) {
            Ok(r) => {
                finite &= r.is_finite();
                diffs.push(r.get(uniuir::losses::DIFF).unwrap_or(f64::NAN));
            }
            Err(e) => {
                return OverfitRun { outcome: Outcome::new(false, format!("stage II at {}: {e}", t.state.iteration)), trainer: None }
            }
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&diffs[..100]), mean(&diffs[diffs.len() - 100..]));
    let frozen = sfpg_params(&t.models) == sfpg_before;
    let elapsed = start.elapsed();
    let outcome = Outcome::all(vec![
        ("stage I".into(), stage1),
        ("stage II finite".into(), Outcome::new(finite && diffs.len() == OVERFIT_STAGE2 as usize, format!("{} iterations", diffs.len()))),
        ("L_diff trend".into(), Outcome::new(last < first, format!("first-100 {first:.3}, last-100 {last:.3}"))),
        ("SFPG frozen".into(), Outcome::new(frozen, if frozen { "unchanged" } else { "stage II changed SFPG" })),
        (
            "runtime".into(),
            Outcome::new(elapsed < OVERFIT_BUDGET, format!("{:.0}s", elapsed.as_secs_f64())),
        ),
    ])
    .with_detail(format!(
        "stage I L1 {:.4} / PSNR {:.2} dB at iteration {} ({stage1_secs:.0}s); stage II 500 its, L_diff first-100 {first:.3} -> last-100 {last:.3}; total {:.0}s",
        fit.0,
        fit.1,
        reached.unwrap_or(0),
        elapsed.as_secs_f64()
    ));
    OverfitRun { outcome, trainer: Some(t) }
}

fn sfpg_params(m: &Models<f32>) -> Vec<Tensor<f32>> {
    m.named_params().into_iter().filter(|(n, _)| n.starts_with("sfpg.")).map(|(_, t)| t).collect()
}

// ---------------------------------------------------------------- criterion 7

pub fn fixture(h: usize, w: usize, seed: u64) -> ImagePlane<f64> {
    ImagePlane::unit(uniform(&[h, w, 3], 0.0, 1.0, seed)).unwrap()
}

pub fn psnr_oracle(a: &ImagePlane<f64>, b: &ImagePlane<f64>) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut se = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                se += (a.at(y, x, c) - b.at(y, x, c)).powi(2);
            }
        }
    }
    let mse = se / (h * w * 3) as f64;
    10.0 * (1.0 / mse).log10()
}

/// SSIM with a direct (non-separable) 11×11 Gaussian window on BT.601 luma.
pub fn ssim_oracle(a: &ImagePlane<f64>, b: &ImagePlane<f64>) -> f64 {
    let (h, w) = (a.height(), a.width());
    let luma = |img: &ImagePlane<f64>, y: usize, x: usize| 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    mx += k * luma(a, y0 + i, x0 + j);
                    my += k * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let (p, q) = (luma(a, y0 + i, x0 + j) - mx, luma(b, y0 + i, x0 + j) - my);
                    vx += k * p * p;
                    vy += k * q * q;
                    cxy += k * p * q;
                }
            }
            sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn lab_oracle(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let lin = |c: f64| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) };
    let (r, g, b) = (lin(r), lin(g), lin(b));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (xn, yn, zn) = (0.4124564 + 0.3575761 + 0.1804375, 0.2126729 + 0.7151522 + 0.0721750, 0.0193339 + 0.1191920 + 0.9503041);
    let f = |t: f64| if t > (6.0f64 / 29.0).powi(3) { t.powf(1.0 / 3.0) } else { t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0 };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

pub fn uciqe_oracle(img: &ImagePlane<f64>) -> f64 {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let (mut ls, mut cs) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let (l, a, b) = lab_oracle(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
            ls.push(l / 100.0);
            cs.push((a * a + b * b).sqrt() / 100.0);
        }
    }
    let mc = cs.iter().sum::<f64>() / n as f64;
    let sc = (cs.iter().map(|c| (c - mc) * (c - mc)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = ls.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let top = sorted[((0.99 * n as f64).floor() as usize).min(n - 1)];
    let bottom = sorted[(0.01 * n as f64).floor() as usize];
    let mut ms = 0.0;
    for i in 0..n {
        if ls[i] > 0.0 {
            ms += cs[i] / ls[i];
        }
    }
    ms /= n as f64;
    0.4680 * sc + 0.2745 * (top - bottom) + 0.2576 * ms
}

/// UIQM terms `(uicm, uism, uiconm)` by direct loops on the 0–255 scale.
pub fn uiqm_oracle_parts(img: &ImagePlane<f64>) -> (f64, f64, f64) {
    let (h, w) = (img.height(), img.width());
    let px = |y: usize, x: usize, c: usize| img.at(y, x, c) * 255.0;
    // UICM
    let mut rg = Vec::new();
    let mut yb = Vec::new();
    for y in 0..h {
        for x in 0..w {
            rg.push(px(y, x, 0) - px(y, x, 1));
            yb.push((px(y, x, 0) + px(y, x, 1)) / 2.0 - px(y, x, 2));
        }
    }
    let trimmed = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = s.len();
        let lo = (0.1 * k as f64).ceil() as usize;
        let hi = (0.1 * k as f64).floor() as usize;
        let kept = &s[lo..k - hi];
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    let (mr, my) = (trimmed(&rg), trimmed(&yb));
    let vr = rg.iter().map(|v| (v - mr).powi(2)).sum::<f64>() / rg.len() as f64;
    let vy = yb.iter().map(|v| (v - my).powi(2)).sum::<f64>() / yb.len() as f64;
    let uicm = -0.0268 * (mr * mr + my * my).sqrt() + 0.1586 * (vr + vy).sqrt();
    // UISM
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let blocks = (h / 8) * (w / 8);
    let mut uism = 0.0;
    for (c, lw) in [0.299, 0.587, 0.114].into_iter().enumerate() {
        let mut mag = vec![vec![0.0; w]; h];
        let mut peak = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let yy = (y as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                        gx += KX[i][j] * px(yy, xx, c);
                        gy += KY[i][j] * px(yy, xx, c);
                    }
                }
                mag[y][x] = (gx * gx + gy * gy).sqrt();
                peak = peak.max(mag[y][x]);
            }
        }
        if peak == 0.0 || blocks == 0 {
            continue;
        }
        let mut eme = 0.0;
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for y in by * 8..by * 8 + 8 {
                    for x in bx * 8..bx * 8 + 8 {
                        let e = mag[y][x] * 255.0 / peak * px(y, x, c);
                        lo = lo.min(e);
                        hi = hi.max(e);
                    }
                }
                if lo > 0.0 {
                    eme += (hi / lo).ln();
                }
            }
        }
        uism += lw * 2.0 / blocks as f64 * eme;
    }
    // UIConM
    let mut amee = 0.0;
    for by in 0..h / 8 {
        for bx in 0..w / 8 {
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for y in by * 8..by * 8 + 8 {
                for x in bx * 8..bx * 8 + 8 {
                    for c in 0..3 {
                        lo = lo.min(px(y, x, c));
                        hi = hi.max(px(y, x, c));
                    }
                }
            }
            if hi - lo > 0.0 && hi + lo > 0.0 {
                let r = (hi - lo) / (hi + lo);
                amee += r * r.ln();
            }
        }
    }
    let uiconm = if blocks == 0 { 0.0 } else { -amee / blocks as f64 };
    (uicm, uism, uiconm)
}

pub fn uiqm_oracle(img: &ImagePlane<f64>) -> f64 {
    let (a, b, c) = uiqm_oracle_parts(img);
    0.0282 * a + 0.2953 * b + 3.5753 * c
}

pub fn metric_oracles() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..5 {
        let (a, b) = (fixture(8, 8, 700 + seed), fixture(8, 8, 800 + seed));
        worst[0] = worst[0].max((metrics::psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs());
        worst[2] = worst[2].max((metrics::uciqe(&a).unwrap() - uciqe_oracle(&a)).abs());
        worst[3] = worst[3].max((metrics::uiqm(&a).unwrap() - uiqm_oracle(&a)).abs());
        // the 11×11 window does not fit an 8×8 fixture; SSIM is checked on 16×16
        let (a, b) = (fixture(16, 16, 900 + seed), fixture(16, 16, 950 + seed));
        worst[1] = worst[1].max((metrics::ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let ssim_small_rejected = metrics::ssim(&fixture(8, 8, 1), &fixture(8, 8, 2)).is_err();
    let names = ["psnr", "ssim", "uciqe", "uiqm"];
    let mut parts: Vec<(String, Outcome)> =
        names.iter().zip(worst).map(|(n, w)| (n.to_string(), Outcome::new(w <= 1e-9, format!("{w:.1e}")))).collect();
    parts.push(("ssim rejects 8x8".into(), Outcome::new(ssim_small_rejected, if ssim_small_rejected { "error" } else { "accepted" })));
    Outcome::all(parts).with_detail(format!(
        "oracle errors psnr {:.1e}, ssim {:.1e} (16x16), uciqe {:.1e}, uiqm {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

pub fn psnr_monotone() -> Outcome {
    let base = fixture(8, 8, 1).into_tensor().map(|v| 0.25 + 0.5 * v);
    let noise = uniform(&[8, 8, 3], -1.0, 1.0, 2);
    let clean = ImagePlane::unit(base.clone()).unwrap();
    let mut prev = f64::INFINITY;
    for i in 1..=20 {
        let amp = i as f64 * 0.01;
        let noisy = Tensor::from_fn(&[8, 8, 3], |j| base.data()[j] + amp * noise.data()[j]);
        let p = metrics::psnr(&clean, &ImagePlane::unit(noisy).unwrap(), 1.0).unwrap();
        if !(p < prev) {
            return Outcome::new(false, format!("psnr {p} at amplitude {amp} not below {prev}"));
        }
        prev = p;
    }
    Outcome::new(true, "20 amplitudes")
}

pub fn uiqm_recomposition() -> Outcome {
    for seed in 0..5 {
        let img = fixture(16, 24, 1000 + seed);
        let p = metrics::uiqm_parts(&img).unwrap();
        let manual = metrics::UIQM_WEIGHTS[0] * p.uicm + metrics::UIQM_WEIGHTS[1] * p.uism + metrics::UIQM_WEIGHTS[2] * p.uiconm;
        if metrics::uiqm(&img).unwrap() != manual {
            return Outcome::new(false, format!("seed {seed}"));
        }
    }
    Outcome::new(true, "exact")
}

pub fn criterion7() -> Outcome {
    Outcome::all(vec![
        ("oracles".into(), metric_oracles()),
        ("psnr monotone".into(), psnr_monotone()),
        ("uiqm recomposition".into(), uiqm_recomposition()),
    ])
    .with_detail(metric_oracles().detail + "; psnr monotone; uiqm recomposition exact")
}

// ---------------------------------------------------------------- criterion 9

pub const TOY_IMAGES: usize = 8;

/// Per-degradation expert histograms of `models` on colour-cast and blurred
/// versions of the same clean scenes.
pub fn degradation_histograms(models: &Models<f32>) -> uniuir::Result<(ExpertHistogram, ExpertHistogram)> {
    let mut rng = seed_all(77);
    let (mut cast, mut blur) = (ExpertHistogram::new(), ExpertHistogram::new());
    let spec = uniuir::depth::DepthProviderSpec::stub();
    for i in 0..TOY_IMAGES {
        let clean = synth::scene::<f32, _>(64, 64, &mut rng)?;
        let a = synth::color_cast(&clean, 1.0)?;
        let b = synth::blur(&clean, 2)?;
        restore_image(models, &a, None, &spec, &mut seed_all(i as u64), Some(&mut cast))?;
        restore_image(models, &b, None, &spec, &mut seed_all(i as u64), Some(&mut blur))?;
    }
    Ok((cast, blur))
}

/// Pearson chi-square test of independence on a `2 × N` table; columns with
/// no counts are dropped. Returns `(statistic, dof, p)`.
pub fn chi_square_2xn(a: &[u64], b: &[u64]) -> (f64, usize, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let cols: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| **x + **y > 0).map(|(&x, &y)| (x as f64, y as f64)).collect();
    let (ra, rb) = (cols.iter().map(|c| c.0).sum::<f64>(), cols.iter().map(|c| c.1).sum::<f64>());
    let n = ra + rb;
    let mut stat = 0.0;
    for &(x, y) in &cols {
        let col = x + y;
        let (ea, eb) = (ra * col / n, rb * col / n);
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let dof = cols.len().saturating_sub(1);
    if dof == 0 {
        return (stat, 0, 1.0);
    }
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    (stat, dof, p)
}

pub fn criterion9(models: &Models<f32>) -> Outcome {
    let (cast, blur) = match degradation_histograms(models) {
        Ok(h) => h,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let expected = (TOY_IMAGES * models.backbone.num_moe_layers() * models.cfg.top_k) as u64;
    let sum = |h: &ExpertHistogram| -> u64 {
        h.to_csv().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum()
    };
    let (sa, sb) = (sum(&cast), sum(&blur));
    let (stat, dof, p) = chi_square_2xn(&cast.totals(), &blur.totals());
    Outcome::all(vec![
        (
            "csv sums".into(),
            Outcome::new(sa == expected && sb == expected, format!("{sa} / {sb}, expected {expected}")),
        ),
        ("chi-square".into(), Outcome::new(p < 0.05, format!("chi2 {stat:.2}, dof {dof}, p {p:.3e}"))),
    ])
    .with_detail_always(format!(
        "csv sums {sa} = {TOY_IMAGES} images x {} layers x top-{}; colour-cast {:?} vs blur {:?}: chi2 {stat:.2}, dof {dof}, p {p:.2e}",
        models.backbone.num_moe_layers(),
        models.cfg.top_k,
        cast.totals(),
        blur.totals()
    ))
}
