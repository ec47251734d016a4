//! Seeded training is reproducible and stage II leaves the paired generator alone.

use uniuir::config::RunConfig;
use uniuir::depth::DepthProviderSpec;
use uniuir::losses::LossReport;
use uniuir::rng::seed_all;
use uniuir::synth;
use uniuir::trainer::{epoch_batch, Models, Stage, TrainPair, Trainer, SFPG};

const STEPS: u64 = 10;

fn pairs() -> Vec<TrainPair<f32>> {
    let mut rng = seed_all(5);
    (0..3)
        .map(|_| {
            let gt = synth::scene::<f32, _>(32, 32, &mut rng).unwrap();
            TrainPair::new(synth::underwater(&gt).unwrap(), gt)
        })
        .collect()
}

fn cfg() -> RunConfig {
    let mut c = RunConfig::tiny();
    c.crop = 16;
    c
}

fn run(t: &mut Trainer<f32>, pairs: &[TrainPair<f32>], steps: u64) -> Vec<LossReport> {
    let c = cfg();
    (0..steps)
        .map(|_| {
            let idx = epoch_batch(c.seed, t.state.iteration, pairs.len(), c.batch).unwrap();
            let b = t.make_batch(pairs, &idx).unwrap();
            t.step(&b).unwrap()
        })
        .collect()
}

fn snapshot(m: &Models<f32>, prefix: &str) -> Vec<(String, uniuir::Tensor<f32>)> {
    let p = format!("{prefix}.");
    m.named_params().into_iter().filter(|(n, _)| n.starts_with(&p)).collect()
}

#[test]
fn same_seed_same_losses() {
    let data = pairs();
    let mut a = Trainer::<f32>::new(&cfg(), DepthProviderSpec::stub()).unwrap();
    let mut b = Trainer::<f32>::new(&cfg(), DepthProviderSpec::stub()).unwrap();
    assert_eq!(run(&mut a, &data, STEPS), run(&mut b, &data, STEPS));
    assert_eq!(a.models.named_params(), b.models.named_params());
}

#[test]
fn different_seed_different_init() {
    let mut other = cfg();
    other.seed += 1;
    let a = Models::<f32>::new(&cfg()).unwrap();
    let b = Models::<f32>::new(&other).unwrap();
    assert_ne!(a.named_params(), b.named_params());
}

#[test]
fn stage_two_freezes_the_paired_generator() {
    let data = pairs();
    let mut t = Trainer::<f32>::new(&cfg(), DepthProviderSpec::stub()).unwrap();
    run(&mut t, &data, 2);
    let mut t = t.into_stage2().unwrap();
    assert_eq!(t.state.stage, Stage::II);
    let before = snapshot(&t.models, SFPG);
    let star_before = snapshot(&t.models, uniuir::trainer::SFPG_STAR);
    let reports = run(&mut t, &data, 3);
    assert!(reports.iter().all(|r| r.is_finite()));
    assert_eq!(snapshot(&t.models, SFPG), before);
    assert_ne!(snapshot(&t.models, uniuir::trainer::SFPG_STAR), star_before);
}

#[test]
fn stage_two_cannot_start_fresh() {
    assert!(Trainer::<f32>::fresh(&cfg(), Stage::II, DepthProviderSpec::stub()).is_err());
}
