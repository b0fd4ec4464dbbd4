//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::dice::AbsentClassPolicy;
use crate::detect::heads::HeadConfig;
use crate::detect::losses::SmoothL1Params;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pyramid_width: usize,
    pub srnn_rounds: usize,
    pub srnn_enabled: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub threads: usize,
    pub normalized_deltas: bool,
    pub absent_class_policy: AbsentClassPolicy,
    pub box_hidden: usize,
    pub mask_width: usize,
    pub roi_batch: usize,
    pub roi_proposals: usize,
    pub smooth_l1_beta: f64,
    pub dataset: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            pyramid_width: 32,
            srnn_rounds: 2,
            srnn_enabled: true,
            learning_rate: 0.0025,
            momentum: 0.9,
            grad_clip: 10.0,
            batch_size: 1,
            max_steps: 5000,
            threads: 1,
            normalized_deltas: false,
            absent_class_policy: AbsentClassPolicy::Zero,
            box_hidden: 128,
            mask_width: 16,
            roi_batch: 48,
            roi_proposals: 32,
            smooth_l1_beta: 1.0,
            dataset: None,
            run_dir: None,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "seed",
    "pyramid_width",
    "srnn_rounds",
    "srnn_enabled",
    "learning_rate",
    "momentum",
    "grad_clip",
    "batch_size",
    "max_steps",
    "threads",
    "normalized_deltas",
    "absent_class_policy",
    "box_hidden",
    "mask_width",
    "roi_batch",
    "roi_proposals",
    "smooth_l1_beta",
    "dataset",
    "run_dir",
];

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn positive_usize(key: &str, v: &str) -> Result<usize> {
    let n: usize = parse_num(key, v)?;
    if n == 0 {
        return Err(Error::Config(format!("{key} must be positive")));
    }
    Ok(n)
}

fn positive_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Config(format!("{key} must be positive, got {v}")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and non-positive numbers are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "pyramid_width" => self.pyramid_width = positive_usize(key, v)?,
            "srnn_rounds" => self.srnn_rounds = positive_usize(key, v)?,
            "srnn_enabled" => self.srnn_enabled = parse_bool(key, v)?,
            "learning_rate" => self.learning_rate = positive_f64(key, v)?,
            "momentum" => {
                let m: f64 = parse_num(key, v)?;
                if !(0.0..1.0).contains(&m) {
                    return Err(Error::Config(format!("momentum must be in [0, 1), got {v}")));
                }
                self.momentum = m;
            }
            "grad_clip" => self.grad_clip = positive_f64(key, v)?,
            "batch_size" => self.batch_size = positive_usize(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "threads" => self.threads = positive_usize(key, v)?,
            "normalized_deltas" => self.normalized_deltas = parse_bool(key, v)?,
            "absent_class_policy" => self.absent_class_policy = v.parse()?,
            "box_hidden" => self.box_hidden = positive_usize(key, v)?,
            "mask_width" => self.mask_width = positive_usize(key, v)?,
            "roi_batch" => self.roi_batch = positive_usize(key, v)?,
            "roi_proposals" => self.roi_proposals = positive_usize(key, v)?,
            "smooth_l1_beta" => self.smooth_l1_beta = positive_f64(key, v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "run_dir" => self.run_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| e.context(format!("config line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("pyramid_width", self.pyramid_width.to_string());
        kv("srnn_rounds", self.srnn_rounds.to_string());
        kv("srnn_enabled", self.srnn_enabled.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("momentum", self.momentum.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("threads", self.threads.to_string());
        kv("normalized_deltas", self.normalized_deltas.to_string());
        kv("absent_class_policy", self.absent_class_policy.as_str().to_string());
        kv("box_hidden", self.box_hidden.to_string());
        kv("mask_width", self.mask_width.to_string());
        kv("roi_batch", self.roi_batch.to_string());
        kv("roi_proposals", self.roi_proposals.to_string());
        kv("smooth_l1_beta", self.smooth_l1_beta.to_string());
        if let Some(p) = &self.dataset {
            kv("dataset", p.display().to_string());
        }
        if let Some(p) = &self.run_dir {
            kv("run_dir", p.display().to_string());
        }
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::default();
        m.extractor.pyramid_width = self.pyramid_width;
        m.extractor.srnn_enabled = self.srnn_enabled;
        m.extractor.srnn_rounds = self.srnn_rounds;
        m.heads = HeadConfig {
            width: self.pyramid_width,
            box_hidden: self.box_hidden,
            mask_width: self.mask_width,
            ..HeadConfig::new(self.pyramid_width)
        };
        m.normalized_deltas = self.normalized_deltas;
        m.smooth_l1 = SmoothL1Params::new(self.smooth_l1_beta)?;
        m.roi_batch = self.roi_batch;
        m.roi_proposals = self.roi_proposals;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = RunConfig::default();
        assert_eq!(c.learning_rate, 0.0025);
        assert_eq!(c.batch_size, 1);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        for k in KEYS.iter().filter(|k| !matches!(**k, "dataset" | "run_dir")) {
            assert!(c.to_text().contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn rejects_unknown_and_non_positive() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("learning_rate = 0").is_err());
        assert!(RunConfig::parse("batch_size = -1").is_err());
        assert!(RunConfig::parse("pyramid_width = 0").is_err());
        assert!(RunConfig::parse("srnn_enabled = maybe").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        let c = RunConfig::parse("# comment\nseed = 7 # trailing\nsrnn_enabled = false\n").unwrap();
        assert_eq!((c.seed, c.srnn_enabled), (7, false));
    }
}
