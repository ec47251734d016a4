use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use uniuir::checkpoint::StageTag;
use uniuir::depth::{predict_depth, DepthProviderSpec};
use uniuir::io::{decode_rgb, load_rgb, save_gray16, save_rgb};
use uniuir::metrics::{MetricReport, MetricRow};
use uniuir::rng::seed_all;
use uniuir::trainer::{epoch_batch, restore_image, Models, Stage, TrainLog, Trainer};
use uniuir::wmoe::ExpertHistogram;
use uniuir::RunConfig;

use crate::dataset::{self, cached_depth, list_files};
use crate::{Cli, Command, DepthArgs, ProviderKind};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg_src = ConfigSource { path: cli.config.clone(), overrides: cli.overrides.clone() };
    match cli.command {
        Command::Validate { root } => validate(&root),
        Command::Depth { input, out, depth, cache } => depth_folder(&input, &out, &depth.spec()?, cache.as_deref()),
        Command::Init { out } => {
            let models = Models::<f32>::new(&cfg_src.resolve(None)?)?;
            models.save(&out, StageTag::Init)?;
            println!("wrote {} ({} parameters)", out.display(), models.num_params());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { stage, data, out, resume, iters, checkpoint_every, wall_time, depth } => train(TrainArgs {
            stage: if stage == 1 { Stage::I } else { Stage::II },
            data,
            out,
            resume,
            iters,
            checkpoint_every,
            wall_time,
            depth: depth.spec()?,
            cfg: cfg_src,
        }),
        Command::Restore { input, out, ckpt, depth, seed, expert_hist, cache } => {
            restore(&input, &out, &ckpt, &depth.spec()?, seed, expert_hist.as_deref(), cache.as_deref(), &cfg_src)
        }
        Command::Evaluate { restored, gt, no_ref: _, out } => evaluate(&restored, gt.as_deref(), out.as_deref()),
        Command::DepthStub { input, output } => {
            let img = load_rgb::<f32>(&input)?;
            save_gray16(&predict_depth(&img, &DepthProviderSpec::stub())?, &output)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

impl DepthArgs {
    pub fn spec(&self) -> Result<DepthProviderSpec> {
        let spec = match (self.provider, &self.command) {
            (ProviderKind::Stub, None) => DepthProviderSpec::stub(),
            (ProviderKind::Stub, Some(_)) => bail!("--depth-cmd needs --depth-provider external"),
            (ProviderKind::External, Some(c)) => DepthProviderSpec::external(c.clone()),
            (ProviderKind::External, None) => bail!("--depth-provider external needs --depth-cmd"),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Config from `--config` (or the environment), else the paper profile;
/// `--set` overrides are applied last.
struct ConfigSource {
    path: Option<PathBuf>,
    overrides: Vec<String>,
}

impl ConfigSource {
    /// `fallback` is used when no config file was named (e.g. the config
    /// stored in a checkpoint).
    fn resolve(&self, fallback: Option<&RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.path, fallback) {
            (Some(p), _) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
            (None, Some(c)) => c.clone(),
            (None, None) => RunConfig::default(),
        };
        let mut sets = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
            match (k.trim(), v.trim()) {
                ("profile", "paper") => cfg = RunConfig::paper(),
                ("profile", "tiny") => cfg = RunConfig::tiny(),
                ("profile", p) => bail!("unknown profile {p:?} (paper, tiny)"),
                kv => sets.push(kv),
            }
        }
        for (k, v) in sets {
            cfg.set(k, v).map_err(|e| anyhow!("--set {k}={v}: {e}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes through a sibling temp file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn is_png(name: &str) -> bool {
    Path::new(name).extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn validate(root: &Path) -> Result<ExitCode> {
    let report = dataset::validate(root)?;
    print!("{}", report.render());
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn depth_folder(input: &Path, out: &Path, spec: &DepthProviderSpec, cache: Option<&Path>) -> Result<ExitCode> {
    std::fs::create_dir_all(out)?;
    let cache = cache.map(Path::to_path_buf).unwrap_or_else(|| out.join(".cache"));
    let mut failed = 0;
    let names: Vec<String> = list_files(input)?.into_iter().filter(|n| is_png(n)).collect();
    for name in &names {
        let result = (|| -> Result<()> {
            let bytes = std::fs::read(input.join(name))?;
            let img = decode_rgb::<f32>(&bytes)?;
            let d = cached_depth(&bytes, &img, spec, &cache)?;
            save_gray16(&d, &out.join(name))?;
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("{name}: {e:#}");
            failed += 1;
        }
    }
    println!("{} depth maps written, {failed} failed", names.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

struct TrainArgs {
    stage: Stage,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    iters: Option<usize>,
    checkpoint_every: u64,
    wall_time: bool,
    depth: DepthProviderSpec,
    cfg: ConfigSource,
}

fn stage_number(stage: Stage) -> u8 {
    match stage {
        Stage::I => 1,
        Stage::II => 2,
    }
}

/// Drops log rows past `iteration` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|f| f.parse::<u64>().ok()).is_some_and(|it| it <= iteration);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let n = stage_number(args.stage);
    let iters_key = format!("iters_stage{n}");
    let mut trainer = match &args.resume {
        None => {
            let mut cfg = args.cfg.resolve(None)?;
            if let Some(it) = args.iters {
                cfg.set(&iters_key, &it.to_string()).map_err(|e| anyhow!(e))?;
            }
            Trainer::<f32>::fresh(&cfg, args.stage, args.depth.clone())?
        }
        Some(ckpt) => {
            let (_, _, meta) = Models::<f32>::from_checkpoint(ckpt, None)
                .with_context(|| format!("checkpoint {}", ckpt.display()))?;
            let mut cfg = args.cfg.resolve(meta.config.as_ref())?;
            if let Some(it) = args.iters {
                cfg.set(&iters_key, &it.to_string()).map_err(|e| anyhow!(e))?;
            }
            Trainer::<f32>::from_checkpoint(ckpt, args.stage, Some(&cfg), args.depth.clone())?
        }
    };
    let (names, pairs) = dataset::load_pairs(&args.data, &args.depth)?;
    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join(format!("stage{n}_log.csv"));
    let start = trainer.state.iteration;
    let resuming = start > 0;
    if resuming {
        truncate_log(&log_path, start)?;
    }
    let mut log = TrainLog::open(&log_path, resuming, args.wall_time)?;
    let total = trainer.total_iters() as u64;
    let (seed, batch) = (trainer.models.cfg.seed, trainer.models.cfg.batch);
    eprintln!(
        "stage {n}: {} pairs, iterations {}..{total}, {} parameters",
        names.len(),
        start + 1,
        trainer.models.num_params()
    );
    let clock = Instant::now();
    while trainer.state.iteration < total {
        let idx = epoch_batch(seed, trainer.state.iteration, pairs.len(), batch)?;
        let b = trainer.make_batch(&pairs, &idx)?;
        let report = trainer.step(&b)?;
        let it = trainer.state.iteration;
        log.write(it, args.stage, trainer.state.lr, &report, clock.elapsed().as_secs_f64() * 1e3)?;
        if args.checkpoint_every > 0 && it % args.checkpoint_every == 0 {
            log.flush()?;
            trainer.save(&args.out.join(format!("stage{n}_{it:06}.ckpt")))?;
        }
    }
    log.flush()?;
    let last = args.out.join(format!("stage{n}_last.ckpt"));
    trainer.save(&last)?;
    eprintln!("wrote {}", last.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn restore(
    input: &Path,
    out: &Path,
    ckpt: &Path,
    spec: &DepthProviderSpec,
    seed: u64,
    hist_path: Option<&Path>,
    cache: Option<&Path>,
    cfg_src: &ConfigSource,
) -> Result<ExitCode> {
    let (_, _, meta) = Models::<f32>::from_checkpoint(ckpt, None).with_context(|| format!("checkpoint {}", ckpt.display()))?;
    let cfg = cfg_src.resolve(meta.config.as_ref())?;
    let (models, _, meta) = Models::<f32>::from_checkpoint(ckpt, Some(&cfg))?;
    if meta.stage != StageTag::StageII {
        eprintln!("warning: {} is a {:?} checkpoint; the prior sampler is not trained", ckpt.display(), meta.stage);
    }
    std::fs::create_dir_all(out)?;
    let names: Vec<String> = list_files(input)?.into_iter().filter(|n| is_png(n)).collect();
    let mut hist = ExpertHistogram::new();
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let mut rng = seed_all(seed).fork(i as u64 + 1);
        let mut h = ExpertHistogram::new();
        let result = (|| -> Result<()> {
            let bytes = std::fs::read(input.join(name))?;
            let img = decode_rgb::<f32>(&bytes)?;
            let depth = match cache {
                Some(c) => Some(cached_depth(&bytes, &img, spec, c)?),
                None => None,
            };
            let restored = restore_image(&models, &img, depth.as_ref(), spec, &mut rng, Some(&mut h))?;
            save_rgb(&restored, &out.join(name))?;
            Ok(())
        })();
        match result {
            Ok(()) => hist.merge(&h),
            Err(e) => {
                eprintln!("{name}: {e:#}");
                failed += 1;
            }
        }
    }
    if let Some(p) = hist_path {
        write_atomic(p, hist.to_csv().as_bytes())?;
    }
    println!("{} restored, {failed} failed", names.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn evaluate(restored: &Path, gt: Option<&Path>, out: Option<&Path>) -> Result<ExitCode> {
    let names: Vec<String> = list_files(restored)?.into_iter().filter(|n| is_png(n)).collect();
    let gt_names: Option<BTreeSet<String>> = match gt {
        Some(g) => Some(list_files(g)?.into_iter().collect()),
        None => None,
    };
    let mut report = MetricReport::default();
    let mut failed = 0;
    for name in &names {
        let result = (|| -> Result<Option<MetricRow>> {
            let img = load_rgb::<f32>(&restored.join(name))?;
            let reference = match (gt, &gt_names) {
                (Some(dir), Some(set)) => {
                    if !set.contains(name) {
                        eprintln!("warning: {name} has no reference in {}; skipped", dir.display());
                        return Ok(None);
                    }
                    Some(load_rgb::<f32>(&dir.join(name))?)
                }
                _ => None,
            };
            Ok(Some(MetricRow::compute(name, &img, reference.as_ref())?))
        })();
        match result {
            Ok(Some(row)) => report.rows.push(row),
            Ok(None) => {}
            Err(e) => {
                eprintln!("{name}: {e:#}");
                failed += 1;
            }
        }
    }
    if let Some(set) = &gt_names {
        let have: BTreeSet<&String> = names.iter().collect();
        for n in set.iter().filter(|n| is_png(n) && !have.contains(n)) {
            eprintln!("warning: reference {n} has no restored image; skipped");
        }
    }
    let csv = report.to_csv();
    match out {
        Some(p) => {
            write_atomic(p, csv.as_bytes())?;
            let m = report.means();
            let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} images: psnr {} ssim {} uciqe {} uiqm {}",
                report.rows.len(),
                show(m[0]),
                show(m[1]),
                show(m[2]),
                show(m[3])
            );
        }
        None => print!("{csv}"),
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
