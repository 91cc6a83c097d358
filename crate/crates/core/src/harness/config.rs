//! Run configuration shared by all commands.
//!
//! Values come from three layers, highest precedence first: command-line
//! flags, a config file, built-in defaults. The config file is flat
//! `key = value` text; `#` starts a comment, blank lines are ignored, and keys
//! are the long flag names (`-` and `_` are interchangeable).

use std::path::PathBuf;

use crate::bench::Mechanism;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Anchor count; 30 unless a command documents otherwise.
    pub m: Option<usize>,
    pub heads: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub input_dim: Option<usize>,
    pub step: Option<f64>,
    pub tol: Option<f64>,
    pub instances: Option<usize>,
    pub iters: Option<usize>,
    pub samples: Option<usize>,
    pub classes: Option<usize>,
    pub clusters: Option<usize>,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub init: Option<String>,
    pub keys: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub mechanisms: Option<Vec<Mechanism>>,
    pub ns: Option<Vec<usize>>,
    pub ms: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
    pub memory_ceiling: Option<u64>,
    pub f32: Option<bool>,
    pub parallel: Option<bool>,
    pub dry_run: Option<bool>,
    pub poison_delta: Option<bool>,
    pub zero_init: Option<bool>,
    pub share_anchors: Option<bool>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Argument(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Argument(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

pub fn parse_mechanisms(value: &str) -> Result<Vec<Mechanism>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "seed" => self.seed = Some(parse(k, value)?),
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "m" => self.m = Some(parse(k, value)?),
            "heads" => self.heads = Some(parse(k, value)?),
            "lr" => self.lr = Some(parse(k, value)?),
            "epochs" => self.epochs = Some(parse(k, value)?),
            "n" => self.n = Some(parse(k, value)?),
            "d" => self.d = Some(parse(k, value)?),
            "input-dim" => self.input_dim = Some(parse(k, value)?),
            "step" => self.step = Some(parse(k, value)?),
            "tol" => self.tol = Some(parse(k, value)?),
            "instances" => self.instances = Some(parse(k, value)?),
            "iters" => self.iters = Some(parse(k, value)?),
            "samples" => self.samples = Some(parse(k, value)?),
            "classes" => self.classes = Some(parse(k, value)?),
            "clusters" => self.clusters = Some(parse(k, value)?),
            "batch" => self.batch = Some(parse(k, value)?),
            "patch" => self.patch = Some(parse(k, value)?),
            "init" => self.init = Some(value.trim().to_string()),
            "keys" => self.keys = Some(PathBuf::from(value.trim())),
            "idx-images" => self.idx_images = Some(PathBuf::from(value.trim())),
            "idx-labels" => self.idx_labels = Some(PathBuf::from(value.trim())),
            "mechanisms" => self.mechanisms = Some(parse_mechanisms(value)?),
            "ns" => self.ns = Some(parse_list(k, value)?),
            "ms" => self.ms = Some(parse_list(k, value)?),
            "reps" => self.reps = Some(parse(k, value)?),
            "warmup" => self.warmup = Some(parse(k, value)?),
            "memory-ceiling" => self.memory_ceiling = Some(parse(k, value)?),
            "f32" => self.f32 = Some(parse_bool(k, value)?),
            "parallel" => self.parallel = Some(parse_bool(k, value)?),
            "dry-run" => self.dry_run = Some(parse_bool(k, value)?),
            "poison-delta" => self.poison_delta = Some(parse_bool(k, value)?),
            "zero-init" => self.zero_init = Some(parse_bool(k, value)?),
            "share-anchors" => self.share_anchors = Some(parse_bool(k, value)?),
            _ => return Err(Error::Argument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_file_contents(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!("config line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key, value)
                .map_err(|e| Error::Argument(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_file_contents(&std::fs::read_to_string(path)?)
    }

    /// `self` with every value present in `over` replaced by it.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            seed,
            out,
            m,
            heads,
            lr,
            epochs,
            n,
            d,
            input_dim,
            step,
            tol,
            instances,
            iters,
            samples,
            classes,
            clusters,
            batch,
            patch,
            init,
            keys,
            idx_images,
            idx_labels,
            mechanisms,
            ns,
            ms,
            reps,
            warmup,
            memory_ceiling,
            f32,
            parallel,
            dry_run,
            poison_delta,
            zero_init,
            share_anchors
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn anchors(&self) -> usize {
        self.m.unwrap_or(crate::anchor::DEFAULT_ANCHORS)
    }

    pub fn flag(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }
}
