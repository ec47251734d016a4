//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comment
//! profile = tiny          # optional; applied before the other keys
//! stage_depths = 1,1,1,1
//! lr_init = 1e-3
//! ```
//!
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    /// Length of the degradation prior (`Ĉ`).
    pub prior_dim: usize,
    pub num_prompts: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub diffusion_steps: usize,
    pub alpha_1: f64,
    pub alpha_t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch: usize,
    pub crop: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub seed: u64,
    /// State size of the selective scan.
    pub ssm_state: usize,
    /// Inner width of the state-space mixer as a multiple of the block width.
    pub ssm_expand: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the stage-II noise-matching term.
    pub eps_weight: f64,
    /// Random horizontal/vertical flips during training.
    pub flip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage_depths: vec![3, 5, 6, 6],
            stage_widths: vec![32, 64, 128, 256],
            prior_dim: 256,
            num_prompts: 5,
            num_experts: 3,
            top_k: 2,
            diffusion_steps: 4,
            alpha_1: 0.99,
            alpha_t: 0.1,
            lambda1: 0.1,
            lambda2: 0.5,
            lr_init: 2e-4,
            lr_final: 1e-6,
            batch: 8,
            crop: 128,
            iters_stage1: 50_000,
            iters_stage2: 200_000,
            seed: 0,
            ssm_state: 16,
            ssm_expand: 2,
            weight_decay: 0.0,
            grad_clip: 1.0,
            eps_weight: 1.0,
            flip: true,
        }
    }
}

impl RunConfig {
    /// Full-size architecture and schedule.
    pub fn paper() -> Self {
        Self::default()
    }

    /// CPU-sized profile used by tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            stage_depths: vec![1, 1, 1, 1],
            stage_widths: vec![8, 16, 32, 64],
            prior_dim: 64,
            batch: 2,
            crop: 64,
            iters_stage1: 2000,
            iters_stage2: 500,
            lr_init: 1e-3,
            ssm_state: 4,
            ssm_expand: 1,
            ..Self::default()
        }
    }

    /// Channel width after the prior generator's shallow encoder.
    pub fn sfpg_width(&self) -> usize {
        self.stage_widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_depths.len() != 4 || self.stage_widths.len() != 4 {
            return bad(format!(
                "stage_depths and stage_widths need 4 entries, got {} and {}",
                self.stage_depths.len(),
                self.stage_widths.len()
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return bad("stage widths must be positive".into());
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!(
                "top_k must satisfy 1 <= k <= num_experts, got k={} N={}",
                self.top_k, self.num_experts
            ));
        }
        if self.diffusion_steps < 1 {
            return bad("diffusion_steps must be >= 1".into());
        }
        if !(0.0 < self.alpha_t && self.alpha_t < self.alpha_1 && self.alpha_1 < 1.0) {
            return bad(format!(
                "need 0 < alpha_t < alpha_1 < 1, got alpha_1={} alpha_t={}",
                self.alpha_1, self.alpha_t
            ));
        }
        if self.prior_dim == 0 || self.num_prompts == 0 {
            return bad("prior_dim and num_prompts must be positive".into());
        }
        if self.ssm_state == 0 || self.ssm_expand == 0 {
            return bad("ssm_state and ssm_expand must be positive".into());
        }
        if self.batch == 0 || self.crop == 0 || self.crop % 8 != 0 {
            return bad(format!("batch must be >= 1 and crop a multiple of 8, got crop={}", self.crop));
        }
        if !(self.lr_init > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return bad("need lr_init > 0 and 0 <= lr_final <= lr_init".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.eps_weight < 0.0 || self.grad_clip < 0.0 {
            return bad("loss weights and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "profile" {
                cfg = match v {
                    "paper" => Self::paper(),
                    "tiny" => Self::tiny(),
                    _ => return Err(Error::InvalidConfig(format!("unknown profile {v:?}"))),
                };
            } else {
                pairs.push((lineno + 1, k.to_string(), v.to_string()));
            }
        }
        for (lineno, k, v) in pairs {
            cfg.set(&k, &v)
                .map_err(|e| Error::InvalidConfig(format!("line {lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<V: std::str::FromStr>(v: &str) -> std::result::Result<V, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
            v.trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .map(|s| num(s.trim()))
                .collect()
        }
        match key {
            "stage_depths" => self.stage_depths = list(value)?,
            "stage_widths" => self.stage_widths = list(value)?,
            "prior_dim" => self.prior_dim = num(value)?,
            "num_prompts" => self.num_prompts = num(value)?,
            "num_experts" => self.num_experts = num(value)?,
            "top_k" => self.top_k = num(value)?,
            "diffusion_steps" => self.diffusion_steps = num(value)?,
            "alpha_1" => self.alpha_1 = num(value)?,
            "alpha_t" | "alpha_T" => self.alpha_t = num(value)?,
            "lambda1" => self.lambda1 = num(value)?,
            "lambda2" => self.lambda2 = num(value)?,
            "lr_init" => self.lr_init = num(value)?,
            "lr_final" => self.lr_final = num(value)?,
            "batch" => self.batch = num(value)?,
            "crop" => self.crop = num(value)?,
            "iters_stage1" => self.iters_stage1 = num(value)?,
            "iters_stage2" => self.iters_stage2 = num(value)?,
            "seed" => self.seed = num(value)?,
            "ssm_state" => self.ssm_state = num(value)?,
            "ssm_expand" => self.ssm_expand = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "grad_clip" => self.grad_clip = num(value)?,
            "eps_weight" => self.eps_weight = num(value)?,
            "flip" => self.flip = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "stage_depths = {}", join(&self.stage_depths));
        let _ = writeln!(s, "stage_widths = {}", join(&self.stage_widths));
        let _ = writeln!(s, "prior_dim = {}", self.prior_dim);
        let _ = writeln!(s, "num_prompts = {}", self.num_prompts);
        let _ = writeln!(s, "num_experts = {}", self.num_experts);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "diffusion_steps = {}", self.diffusion_steps);
        let _ = writeln!(s, "alpha_1 = {:?}", self.alpha_1);
        let _ = writeln!(s, "alpha_t = {:?}", self.alpha_t);
        let _ = writeln!(s, "lambda1 = {:?}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {:?}", self.lambda2);
        let _ = writeln!(s, "lr_init = {:?}", self.lr_init);
        let _ = writeln!(s, "lr_final = {:?}", self.lr_final);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "iters_stage1 = {}", self.iters_stage1);
        let _ = writeln!(s, "iters_stage2 = {}", self.iters_stage2);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ssm_state = {}", self.ssm_state);
        let _ = writeln!(s, "ssm_expand = {}", self.ssm_expand);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "grad_clip = {:?}", self.grad_clip);
        let _ = writeln!(s, "eps_weight = {:?}", self.eps_weight);
        let _ = writeln!(s, "flip = {}", self.flip);
        s
    }
}
