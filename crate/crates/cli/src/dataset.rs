//! Dataset layout (`input/`, `gt/`, optional `depth/`) and the depth cache.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use uniuir::depth::{predict_depth, DepthMode, DepthProviderSpec};
use uniuir::image::{DepthProvenance, DepthRaster, ImagePlane};
use uniuir::io::{decode_rgb, load_gray16, save_gray16};
use uniuir::trainer::TrainPair;

pub const INPUT_DIR: &str = "input";
pub const GT_DIR: &str = "gt";
pub const DEPTH_DIR: &str = "depth";

/// Sorted file names (not paths) of the regular files in `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Problems found by [`validate`]; clean when all lists are empty.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub pairs: Vec<String>,
    pub missing_gt: Vec<String>,
    pub missing_input: Vec<String>,
    pub undecodable: Vec<(PathBuf, String)>,
    pub size_mismatch: Vec<(String, (usize, usize), (usize, usize))>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing_gt.is_empty()
            && self.missing_input.is_empty()
            && self.undecodable.is_empty()
            && self.size_mismatch.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for n in &self.missing_gt {
            let _ = writeln!(s, "unpaired: {INPUT_DIR}/{n} has no {GT_DIR}/{n}");
        }
        for n in &self.missing_input {
            let _ = writeln!(s, "unpaired: {GT_DIR}/{n} has no {INPUT_DIR}/{n}");
        }
        for (p, e) in &self.undecodable {
            let _ = writeln!(s, "undecodable: {}: {e}", p.display());
        }
        for (n, a, b) in &self.size_mismatch {
            let _ = writeln!(s, "size mismatch: {n}: input {}x{}, gt {}x{}", a.1, a.0, b.1, b.0);
        }
        if self.is_clean() {
            let _ = writeln!(s, "{} pairs OK", self.pairs.len());
        } else {
            let bad = self.missing_gt.len()
                + self.missing_input.len()
                + self.undecodable.len()
                + self.size_mismatch.len();
            let _ = writeln!(s, "{bad} problem(s); {} usable pairs", self.pairs.len());
        }
        s
    }
}

fn decode_size(path: &Path) -> std::result::Result<(usize, usize), String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let img = decode_rgb::<f32>(&bytes).map_err(|e| e.to_string())?;
    Ok((img.height(), img.width()))
}

pub fn validate(root: &Path) -> Result<ValidationReport> {
    if !root.is_dir() {
        bail!("dataset root {} does not exist", root.display());
    }
    let (in_dir, gt_dir) = (root.join(INPUT_DIR), root.join(GT_DIR));
    for d in [&in_dir, &gt_dir] {
        if !d.is_dir() {
            bail!("missing folder {}", d.display());
        }
    }
    let inputs: BTreeSet<String> = list_files(&in_dir)?.into_iter().collect();
    let gts: BTreeSet<String> = list_files(&gt_dir)?.into_iter().collect();
    let mut report = ValidationReport {
        missing_gt: inputs.difference(&gts).cloned().collect(),
        missing_input: gts.difference(&inputs).cloned().collect(),
        ..Default::default()
    };
    for name in inputs.intersection(&gts) {
        let a = decode_size(&in_dir.join(name));
        let b = decode_size(&gt_dir.join(name));
        for (r, dir) in [(&a, &in_dir), (&b, &gt_dir)] {
            if let Err(e) = r {
                report.undecodable.push((dir.join(name), e.clone()));
            }
        }
        match (a, b) {
            (Ok(a), Ok(b)) if a != b => report.size_mismatch.push((name.clone(), a, b)),
            (Ok(_), Ok(_)) => report.pairs.push(name.clone()),
            _ => {}
        }
    }
    Ok(report)
}

/// Cache key: SHA-256 over the provider identity and the encoded image.
pub fn depth_key(bytes: &[u8], spec: &DepthProviderSpec) -> String {
    let mut h = Sha256::new();
    match spec.mode {
        DepthMode::Stub => h.update(b"stub\0"),
        DepthMode::External => {
            h.update(b"external\0");
            h.update(spec.external_command.as_deref().unwrap_or_default().as_bytes());
            h.update(b"\0");
        }
    }
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Depth of an encoded image, read from `cache` when present and stored there
/// otherwise. The returned raster is always the 16-bit quantized one, so a
/// cache hit and a miss give identical values.
pub fn cached_depth(
    bytes: &[u8],
    img: &ImagePlane<f32>,
    spec: &DepthProviderSpec,
    cache: &Path,
) -> Result<DepthRaster<f32>> {
    let provenance = match spec.mode {
        DepthMode::Stub => DepthProvenance::Stub,
        DepthMode::External => DepthProvenance::External,
    };
    let path = cache.join(format!("{}.png", depth_key(bytes, spec)));
    if !path.exists() {
        std::fs::create_dir_all(cache)?;
        save_gray16(&predict_depth(img, spec)?, &path)?;
    }
    let raw = load_gray16(&path)?;
    if raw.shape() != [img.height(), img.width()] {
        bail!("cached depth {} does not match the image size", path.display());
    }
    Ok(DepthRaster::new(raw.map(|v| v / 65535.0).cast::<f32>(), provenance)?)
}

/// Decoded training pairs; external depth is attached through the cache.
pub fn load_pairs(root: &Path, spec: &DepthProviderSpec) -> Result<(Vec<String>, Vec<TrainPair<f32>>)> {
    let report = validate(root)?;
    if !report.is_clean() {
        bail!("dataset {} is not clean:\n{}", root.display(), report.render().trim_end());
    }
    if report.pairs.is_empty() {
        bail!("dataset {} holds no pairs", root.display());
    }
    let cache = root.join(DEPTH_DIR);
    let mut pairs = Vec::with_capacity(report.pairs.len());
    for name in &report.pairs {
        let read = |dir: &str| -> Result<(Vec<u8>, ImagePlane<f32>)> {
            let path = root.join(dir).join(name);
            let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let img = decode_rgb(&bytes).with_context(|| format!("cannot decode {}", path.display()))?;
            Ok((bytes, img))
        };
        let (lq_bytes, lq) = read(INPUT_DIR)?;
        let (gt_bytes, gt) = read(GT_DIR)?;
        let mut pair = TrainPair::new(lq, gt);
        if spec.mode == DepthMode::External {
            pair.depth_lq = Some(cached_depth(&lq_bytes, &pair.lq, spec, &cache)?);
            pair.depth_gt = Some(cached_depth(&gt_bytes, &pair.gt, spec, &cache)?);
        }
        pairs.push(pair);
    }
    Ok((report.pairs, pairs))
}
