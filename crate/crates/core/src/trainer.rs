//! Two-stage training and the inference pipeline.
//!
//! Stage I trains the paired prior generator and the backbone on
//! GT-derived priors. Stage II freezes the prior generator and trains the
//! condition generator, the denoiser and the backbone on denoised priors.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::backbone::{restore, Backbone, SIZE_MULTIPLE};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, NamedArrays, StageTag};
use crate::config::RunConfig;
use crate::depth::{predict_depth, stub_depth_graph, stub_depth_tensor, DepthMode, DepthProviderSpec};
use crate::error::{invalid, Error, Result};
use crate::image::{DepthProvenance, DepthRaster, ImagePlane, PriorKind, PriorVector, ValueDomain};
use crate::lcdm::{make_schedule, q_sample_graph, reverse_chain, sample, Denoiser, NoiseSchedule};
use crate::losses::{stage1_objective, stage2_objective, LossReport};
use crate::nn::{Builder, ParamStore};
use crate::optim::{collect_and_clip, AdamW};
use crate::padding::{crop, pad_to_multiple};
use crate::rng::{seed_all, DeterministicRng};
use crate::scalar::Scalar;
use crate::sfpg::{sfpg_star_forward, Sfpg};
use crate::tensor::Tensor;
use crate::wmoe::{ExpertHistogram, MoeMode};

/// Stream label of parameter initialization (training uses the base stream).
const INIT_STREAM: u64 = 1;

pub const BACKBONE: &str = "backbone";
pub const SFPG: &str = "sfpg";
pub const SFPG_STAR: &str = "sfpg_star";
pub const DENOISER: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    I,
    II,
}

impl Stage {
    pub fn tag(self) -> StageTag {
        match self {
            Stage::I => StageTag::StageI,
            Stage::II => StageTag::StageII,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
        }
    }
}

/// `lr1 + ½ (lr0 − lr1)(1 + cos(π · iter / total))`; `iter > total` stays at `lr1`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64, lr1: f64) -> f64 {
    if total == 0 || iter >= total {
        return lr1;
    }
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

/// Crop window and flips shared by both images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

pub fn draw_window<R: Rng + ?Sized>(h: usize, w: usize, size: usize, flip: bool, rng: &mut R) -> Result<AugmentWindow> {
    if h < size || w < size {
        return Err(invalid(format!(
            "{h}×{w} image is smaller than the {size}×{size} crop; upscale or pad the data, or lower `crop`"
        )));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    let (hflip, vflip) = if flip { (rng.random(), rng.random()) } else { (false, false) };
    Ok(AugmentWindow { y, x, size, hflip, vflip })
}

/// Applies a window to an `[H, W, C]` tensor.
pub fn apply_window<T: Scalar>(t: &Tensor<T>, win: &AugmentWindow) -> Tensor<T> {
    let (w, c) = (t.dim(1), t.dim(2));
    let n = win.size;
    let src = t.data();
    let mut out = Vec::with_capacity(n * n * c);
    for oy in 0..n {
        let sy = win.y + if win.vflip { n - 1 - oy } else { oy };
        for ox in 0..n {
            let sx = win.x + if win.hflip { n - 1 - ox } else { ox };
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::from_fn(&[n, n, c], |i| out[i])
}

/// Same random crop and flips for both images.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    lq: &ImagePlane<T>,
    gt: &ImagePlane<T>,
    size: usize,
    flip: bool,
    rng: &mut R,
) -> Result<(ImagePlane<T>, ImagePlane<T>)> {
    if lq.tensor().shape() != gt.tensor().shape() {
        return Err(invalid("pair images differ in size"));
    }
    let win = draw_window(lq.height(), lq.width(), size, flip, rng)?;
    Ok((
        ImagePlane::new(apply_window(lq.tensor(), &win), lq.domain())?,
        ImagePlane::new(apply_window(gt.tensor(), &win), gt.domain())?,
    ))
}

/// Shuffled batches of indices; the incomplete tail of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(invalid(format!("batch {batch} does not fit a set of {n} pairs")));
        }
        Ok(Self { order: (0..n).collect(), batch, pos: n })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Stream label of the epoch permutations used by [`epoch_batch`].
const SAMPLER_STREAM: u64 = 1 << 32;

/// Indices of batch `iter` (0-based) as a pure function of the seed, so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn epoch_batch(seed: u64, iter: u64, n: usize, batch: usize) -> Result<Vec<usize>> {
    if batch == 0 || batch > n {
        return Err(invalid(format!("batch {batch} does not fit a set of {n} pairs")));
    }
    let per_epoch = (n / batch) as u64;
    let (epoch, slot) = (iter / per_epoch, (iter % per_epoch) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed_all(seed).fork(SAMPLER_STREAM + epoch));
    Ok(order[slot * batch..(slot + 1) * batch].to_vec())
}

/// One training pair with optional precomputed depth maps.
#[derive(Debug, Clone)]
pub struct TrainPair<T> {
    pub lq: ImagePlane<T>,
    pub gt: ImagePlane<T>,
    pub depth_lq: Option<DepthRaster<T>>,
    pub depth_gt: Option<DepthRaster<T>>,
}

impl<T: Scalar> TrainPair<T> {
    pub fn new(lq: ImagePlane<T>, gt: ImagePlane<T>) -> Self {
        Self { lq, gt, depth_lq: None, depth_gt: None }
    }
}

/// Stacked `[B, H, W, ·]` inputs of one step.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub lq: Tensor<T>,
    pub gt: Tensor<T>,
    pub depth_lq: Tensor<T>,
    pub depth_gt: Tensor<T>,
}

fn depth_batch<T: Scalar>(
    imgs: &[ImagePlane<T>],
    given: &[Option<DepthRaster<T>>],
    spec: &DepthProviderSpec,
) -> Result<Tensor<T>> {
    let maps = imgs
        .iter()
        .zip(given)
        .map(|(img, d)| match d {
            Some(d) => Ok(d.to_batch().index_first(0)),
            None => Ok(predict_depth(img, spec)?.to_batch().index_first(0)),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&maps)
}

impl<T: Scalar> Batch<T> {
    /// Stacks pairs as they are; missing depth comes from `spec`.
    pub fn from_pairs(pairs: &[TrainPair<T>], spec: &DepthProviderSpec) -> Result<Self> {
        let lq: Vec<_> = pairs.iter().map(|p| p.lq.clone()).collect();
        let gt: Vec<_> = pairs.iter().map(|p| p.gt.clone()).collect();
        let dl: Vec<_> = pairs.iter().map(|p| p.depth_lq.clone()).collect();
        let dg: Vec<_> = pairs.iter().map(|p| p.depth_gt.clone()).collect();
        Ok(Self {
            depth_lq: depth_batch(&lq, &dl, spec)?,
            depth_gt: depth_batch(&gt, &dg, spec)?,
            lq: ImagePlane::batch(&lq)?,
            gt: ImagePlane::batch(&gt)?,
        })
    }

    /// Crops and flips every pair (and its depth) with its own window.
    pub fn augmented<R: Rng + ?Sized>(
        pairs: &[&TrainPair<T>],
        crop: usize,
        flip: bool,
        spec: &DepthProviderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.lq.tensor().shape() != p.gt.tensor().shape() {
                return Err(invalid("pair images differ in size"));
            }
            let win = draw_window(p.lq.height(), p.lq.width(), crop, flip, rng)?;
            let cut_depth = |d: &Option<DepthRaster<T>>| -> Result<Option<DepthRaster<T>>> {
                d.as_ref()
                    .map(|d| {
                        let t = d.tensor().clone().reshape(&[d.height(), d.width(), 1])?;
                        let t = apply_window(&t, &win).reshape(&[crop, crop])?;
                        DepthRaster::new(t, d.provenance())
                    })
                    .transpose()
            };
            out.push(TrainPair {
                lq: ImagePlane::new(apply_window(p.lq.tensor(), &win), p.lq.domain())?,
                gt: ImagePlane::new(apply_window(p.gt.tensor(), &win), p.gt.domain())?,
                depth_lq: cut_depth(&p.depth_lq)?,
                depth_gt: cut_depth(&p.depth_gt)?,
            });
        }
        Self::from_pairs(&out, spec)
    }

    pub fn size(&self) -> usize {
        self.lq.dim(0)
    }
}

/// Every network of the system in one parameter store.
#[derive(Debug, Clone)]
pub struct Models<T> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub sfpg: Sfpg,
    pub sfpg_star: Sfpg,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> Models<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(cfg)?;
        let mut store = ParamStore::new();
        let mut rng = seed_all(cfg.seed).fork(INIT_STREAM);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut b, BACKBONE, cfg);
        let sfpg = Sfpg::paired(&mut b, SFPG, cfg);
        let sfpg_star = Sfpg::star(&mut b, SFPG_STAR, cfg);
        let denoiser = Denoiser::new(&mut b, DENOISER, cfg.prior_dim);
        Ok(Self { cfg: cfg.clone(), store, backbone, sfpg, sfpg_star, denoiser, schedule })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn num_params_of(&self, prefix: &str) -> usize {
        self.store.num_scalars_prefix(&format!("{prefix}."))
    }

    pub fn named_params(&self) -> NamedArrays<T> {
        self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn load_params(&mut self, arrays: &NamedArrays<T>) -> Result<()> {
        self.store
            .load_from(arrays.iter().filter(|(n, _)| !n.starts_with("optim.")).map(|(n, t)| (n.as_str(), t)))
    }

    /// Models from a checkpoint; the stored config wins unless `cfg` is given.
    pub fn from_checkpoint(path: &Path, cfg: Option<&RunConfig>) -> Result<(Self, NamedArrays<T>, CheckpointMeta)> {
        let (arrays, meta) = load_checkpoint::<T>(path)?;
        let cfg = cfg
            .cloned()
            .or_else(|| meta.config.clone())
            .ok_or_else(|| Error::Format("checkpoint carries no config".into()))?;
        let mut m = Self::new(&cfg)?;
        m.load_params(&arrays)?;
        Ok((m, arrays, meta))
    }

    pub fn save(&self, path: &Path, stage: StageTag) -> Result<()> {
        let meta = CheckpointMeta { config: Some(self.cfg.clone()), stage, iteration: 0, rng: None };
        save_checkpoint(&self.named_params(), &meta, path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer steps in the current stage.
    pub iteration: u64,
    pub stage: Stage,
    /// Learning rate of the last step.
    pub lr: f64,
    pub rng: DeterministicRng,
}

pub struct Trainer<T> {
    pub models: Models<T>,
    pub opt: AdamW<T>,
    pub state: TrainState,
    pub depth: DepthProviderSpec,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh stage I run.
    pub fn new(cfg: &RunConfig, depth: DepthProviderSpec) -> Result<Self> {
        depth.validate()?;
        let models = Models::new(cfg)?;
        Ok(Self::with_models(models, Stage::I, depth))
    }

    /// Stage II needs stage I weights; see [`Trainer::from_checkpoint`] and
    /// [`Trainer::into_stage2`].
    pub fn fresh(cfg: &RunConfig, stage: Stage, depth: DepthProviderSpec) -> Result<Self> {
        match stage {
            Stage::I => Self::new(cfg, depth),
            Stage::II => Err(Error::Staging("stage II needs a stage I checkpoint (--resume)".into())),
        }
    }

    fn with_models(mut models: Models<T>, stage: Stage, depth: DepthProviderSpec) -> Self {
        models.store.set_all_trainable(true);
        if stage == Stage::II {
            models.store.set_trainable_prefix(&format!("{SFPG}."), false);
        }
        let rng = seed_all(models.cfg.seed);
        let lr = models.cfg.lr_init;
        Self {
            opt: AdamW::new(models.cfg.weight_decay),
            state: TrainState { iteration: 0, stage, lr, rng },
            models,
            depth,
        }
    }

    /// Continues a stage from its own checkpoint, or starts stage II from a
    /// stage I checkpoint.
    pub fn from_checkpoint(path: &Path, stage: Stage, cfg: Option<&RunConfig>, depth: DepthProviderSpec) -> Result<Self> {
        depth.validate()?;
        let (models, arrays, meta) = Models::<T>::from_checkpoint(path, cfg)?;
        match (stage, meta.stage) {
            (Stage::I, StageTag::StageI) | (Stage::II, StageTag::StageII) => {
                let mut t = Self::with_models(models, stage, depth);
                t.opt.import(&t.models.store, arrays.iter().map(|(n, v)| (n.as_str(), v)))?;
                t.state.iteration = meta.iteration;
                if let Some(r) = meta.rng.as_ref() {
                    t.state.rng = DeterministicRng::from_state(r)
                        .ok_or_else(|| Error::Format("bad rng state in checkpoint".into()))?;
                }
                t.state.lr = t.lr_at(meta.iteration.saturating_sub(1) as usize);
                Ok(t)
            }
            (Stage::II, StageTag::StageI) => Ok(Self::with_models(models, Stage::II, depth)),
            (Stage::I, StageTag::StageII) => {
                Err(Error::Staging("cannot continue stage I from a stage II checkpoint".into()))
            }
            (_, StageTag::Init) => Err(Error::Staging(format!(
                "{} holds untrained weights; stage {} needs a trained stage I checkpoint",
                path.display(),
                stage.label()
            ))),
        }
    }

    /// Moves a finished stage I run to stage II with a fresh optimizer.
    pub fn into_stage2(self) -> Result<Self> {
        if self.state.stage != Stage::I || self.state.iteration == 0 {
            return Err(Error::Staging("stage II needs a trained stage I model".into()));
        }
        Ok(Self::with_models(self.models, Stage::II, self.depth))
    }

    pub fn total_iters(&self) -> usize {
        match self.state.stage {
            Stage::I => self.models.cfg.iters_stage1,
            Stage::II => self.models.cfg.iters_stage2,
        }
    }

    fn lr_at(&self, iter: usize) -> f64 {
        cosine_lr(iter, self.total_iters(), self.models.cfg.lr_init, self.models.cfg.lr_final)
    }

    /// Crops and stacks the pairs at `idx` using the trainer's stream.
    pub fn make_batch(&mut self, pairs: &[TrainPair<T>], idx: &[usize]) -> Result<Batch<T>> {
        let picked: Vec<&TrainPair<T>> = idx.iter().map(|&i| &pairs[i]).collect();
        let cfg = &self.models.cfg;
        Batch::augmented(&picked, cfg.crop, cfg.flip, &self.depth, &mut self.state.rng)
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        match self.state.stage {
            Stage::I => self.stage1_step(batch),
            Stage::II => self.stage2_step(batch),
        }
    }

    /// External-mode depth of the restored batch (no gradient).
    fn external_depth(&self, x_hq: &Tensor<T>) -> Result<Tensor<T>> {
        let imgs = ImagePlane::unbatch(x_hq, ValueDomain::UnitInterval)?;
        let given = vec![None; imgs.len()];
        depth_batch(&imgs, &given, &self.depth)
    }

    pub fn stage1_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        if self.state.stage != Stage::I {
            return Err(Error::Staging("stage1_step called during stage II".into()));
        }
        let lr = self.lr_at(self.state.iteration as usize);
        let m = &self.models;
        let mut g = Graph::new(&m.store);
        let x = g.constant(batch.lq.clone());
        let y = g.constant(batch.gt.clone());
        let xy = g.concat_last(&[x, y]);
        let z = m.sfpg.forward(&mut g, xy).z;
        let x_hq = m.backbone.forward(&mut g, x, z, &batch.depth_lq, MoeMode::Train, m.cfg.top_k, None);
        let d_pseudo = g.constant(batch.depth_gt.clone());
        let d_hq = match self.depth.mode {
            DepthMode::Stub => stub_depth_graph(&mut g, x_hq),
            DepthMode::External => {
                let d = self.external_depth(g.value(x_hq))?;
                g.constant(d)
            }
        };
        let (total, report) = stage1_objective(&mut g, x_hq, y, d_pseudo, d_hq, &m.cfg);
        let grads = self.check_and_backward(&g, total, &report)?;
        drop(g);
        self.apply(grads, report, lr)
    }

    pub fn stage2_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        if self.state.stage != Stage::II {
            return Err(Error::Staging("stage2_step called during stage I".into()));
        }
        let lr = self.lr_at(self.state.iteration as usize);
        let m = &self.models;
        let (b, dim) = (batch.size(), m.cfg.prior_dim);
        let steps = m.schedule.steps();
        let t = self.state.rng.random_range(1..=steps);
        let eps = Tensor::randn(&[b, dim], 1.0, &mut self.state.rng);
        let eps_start = Tensor::randn(&[b, dim], 1.0, &mut self.state.rng);
        let mut g = Graph::new(&m.store);
        let x = g.constant(batch.lq.clone());
        let y = g.constant(batch.gt.clone());
        let xy = g.concat_last(&[x, y]);
        let z = m.sfpg.forward(&mut g, xy).z;
        let c = m.sfpg_star.forward(&mut g, x).z;
        let eps_v = g.constant(eps);
        let z_t = q_sample_graph(&mut g, z, t, eps_v, &m.schedule);
        let eps_pred = m.denoiser.forward(&mut g, z_t, c, t);
        let start = g.constant(eps_start);
        let z_start = q_sample_graph(&mut g, z, steps, start, &m.schedule);
        let z_hat = reverse_chain(&mut g, &m.denoiser, z_start, c, &m.schedule, &mut self.state.rng);
        let x_hq = m.backbone.forward(&mut g, x, z_hat, &batch.depth_lq, MoeMode::Train, m.cfg.top_k, None);
        let eps_pair = (m.cfg.eps_weight > 0.0).then_some((eps_pred, eps_v));
        let (total, report) = stage2_objective(&mut g, x_hq, y, z, z_hat, eps_pair, &m.cfg);
        let grads = self.check_and_backward(&g, total, &report)?;
        drop(g);
        self.apply(grads, report, lr)
    }

    fn check_and_backward(&self, g: &Graph<'_, T>, total: Var, report: &LossReport) -> Result<Gradients<T>> {
        if !report.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at stage {} iteration {}",
                self.state.stage.label(),
                self.state.iteration + 1
            )));
        }
        Ok(g.backward(total))
    }

    fn apply(&mut self, grads: Gradients<T>, report: LossReport, lr: f64) -> Result<LossReport> {
        let (grads, norm) = collect_and_clip(&self.models.store, grads, self.models.cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient norm".into()));
        }
        self.opt.step(&mut self.models.store, &grads, lr);
        self.state.iteration += 1;
        self.state.lr = lr;
        Ok(report)
    }

    /// Parameters, optimizer moments and the position of the run.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = self.models.named_params();
        arrays.extend(self.opt.export(&self.models.store));
        let meta = CheckpointMeta {
            config: Some(self.models.cfg.clone()),
            stage: self.state.stage.tag(),
            iteration: self.state.iteration,
            rng: Some(self.state.rng.state()),
        };
        save_checkpoint(&arrays, &meta, path)
    }
}

/// Per-iteration CSV log: `iter,stage,lr,<components>,total[,wall_ms]`.
pub struct TrainLog {
    out: BufWriter<File>,
    wall: bool,
    header_done: bool,
}

impl TrainLog {
    /// Opens `path`; `append` keeps existing rows (resume).
    pub fn open(path: &Path, append: bool, wall: bool) -> Result<Self> {
        let existing = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            ?;
        Ok(Self { out: BufWriter::new(file), wall, header_done: existing })
    }

    pub fn header(report: &LossReport, wall: bool) -> String {
        let mut s = String::from("iter,stage,lr");
        for n in report.names() {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",total");
        if wall {
            s.push_str(",wall_ms");
        }
        s
    }

    pub fn row(iter: u64, stage: Stage, lr: f64, report: &LossReport, wall_ms: Option<f64>) -> String {
        let mut s = format!("{iter},{},{lr:e},{},{:e}", stage.label(), report.csv_fields(), report.total);
        if let Some(w) = wall_ms {
            s.push_str(&format!(",{w:.1}"));
        }
        s
    }

    pub fn write(&mut self, iter: u64, stage: Stage, lr: f64, report: &LossReport, wall_ms: f64) -> Result<()> {
        if !self.header_done {
            writeln!(self.out, "{}", Self::header(report, self.wall))?;
            self.header_done = true;
        }
        writeln!(self.out, "{}", Self::row(iter, stage, lr, report, self.wall.then_some(wall_ms)))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Full inference for one image of any size: pad, condition, sample the
/// prior, restore, crop.
pub fn restore_image<T: Scalar>(
    models: &Models<T>,
    img: &ImagePlane<T>,
    depth: Option<&DepthRaster<T>>,
    spec: &DepthProviderSpec,
    rng: &mut DeterministicRng,
    hist: Option<&mut ExpertHistogram>,
) -> Result<ImagePlane<T>> {
    if img.channels() != 3 {
        return Err(invalid(format!("expected RGB, got {} channels", img.channels())));
    }
    let (padded, record) = pad_to_multiple(img, SIZE_MULTIPLE)?;
    let d = match depth {
        Some(d) => {
            if (d.height(), d.width()) != (img.height(), img.width()) {
                return Err(invalid("depth map size differs from the image"));
            }
            let plane = ImagePlane::feature(d.tensor().clone().reshape(&[d.height(), d.width(), 1])?)?;
            let (p, _) = pad_to_multiple(&plane, SIZE_MULTIPLE)?;
            let (h, w) = (p.height(), p.width());
            DepthRaster::new(p.into_tensor().reshape(&[h, w])?, d.provenance())?
        }
        None => predict_depth(&padded, spec)?,
    };
    let c = sfpg_star_forward(&models.store, &models.sfpg_star, &padded)?;
    let z = sample(&models.store, &models.denoiser, &c, &models.schedule, rng)?;
    let out = restore(
        &models.store,
        &models.backbone,
        &padded,
        &z,
        &d,
        MoeMode::Infer,
        models.cfg.top_k,
        hist,
    )?;
    crop(&out, &record)
}

/// Restores with a given prior instead of a sampled one (stage I style).
pub fn restore_with_prior<T: Scalar>(
    models: &Models<T>,
    img: &ImagePlane<T>,
    z: &PriorVector<T>,
    mode: MoeMode,
    hist: Option<&mut ExpertHistogram>,
) -> Result<ImagePlane<T>> {
    let (padded, record) = pad_to_multiple(img, SIZE_MULTIPLE)?;
    let t = stub_depth_tensor(&padded.to_batch());
    let d = DepthRaster::new(t.reshape(&[padded.height(), padded.width()])?, DepthProvenance::Stub)?;
    let out = restore(&models.store, &models.backbone, &padded, z, &d, mode, models.cfg.top_k, hist)?;
    crop(&out, &record)
}

/// The paired prior of a pair, through the trained generator.
pub fn paired_prior<T: Scalar>(models: &Models<T>, lq: &ImagePlane<T>, gt: &ImagePlane<T>) -> Result<PriorVector<T>> {
    let (z, _) = crate::sfpg::sfpg_forward(&models.store, &models.sfpg, lq, gt)?;
    Ok(z.with_kind(PriorKind::Prior))
}
