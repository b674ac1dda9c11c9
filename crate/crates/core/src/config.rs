//! Training configuration: flat `key = value` files with `include`, variant
//! presets, validation and a canonical hash.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{FbError, Result};
use crate::kv::{self, Entry};
use crate::networks::BlockLayout;

/// Which reading of the member index in the FB loss to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemberIndexing {
    /// Loss for member `m` uses `F_m` in the online term.
    PerMember,
    /// Every member's loss uses the online ensemble mean.
    Literal,
}

impl MemberIndexing {
    pub fn name(self) -> &'static str {
        match self {
            MemberIndexing::PerMember => "per-member",
            MemberIndexing::Literal => "literal",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "per-member" => Ok(MemberIndexing::PerMember),
            "literal" => Ok(MemberIndexing::Literal),
            _ => Err(FbError::Config(format!("member_indexing must be per-member or literal, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: String,
    pub d: usize,
    pub blocks: usize,
    /// Explicit block sizes; empty means `d / blocks` each.
    pub block_sizes: Vec<usize>,
    pub gamma: f64,
    pub tau_mix: f64,
    pub beta: f64,
    pub lr: f64,
    pub lr_actor: f64,
    pub polyak_zeta: f64,
    pub lambda_ortho: f64,
    pub batch_i: usize,
    pub batch_j: usize,
    pub ensemble_m: usize,
    pub steps: usize,
    pub seed: u64,
    pub es_samples: usize,
    pub hidden: usize,
    pub one_hot_states: bool,
    pub actor: String,
    pub member_indexing: MemberIndexing,
    pub advantage_sum_literal: bool,
    pub aw_independent_z: bool,
    pub z_cache_interval: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub divergence_threshold: f64,
}

pub const VARIANTS: [&str; 3] = ["vanilla", "aw", "aware"];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("aware").expect("aware preset")
    }
}

impl TrainConfig {
    /// Defaults for one of the registered variants.
    pub fn preset(variant: &str) -> Result<Self> {
        let base = Self {
            variant: variant.to_string(),
            d: 16,
            blocks: 1,
            block_sizes: Vec::new(),
            gamma: 0.9,
            tau_mix: 0.5,
            beta: 0.1,
            lr: 1e-3,
            lr_actor: 1e-3,
            polyak_zeta: 0.99,
            lambda_ortho: 1.0,
            batch_i: 64,
            batch_j: 1,
            ensemble_m: 2,
            steps: 50_000,
            seed: 0,
            es_samples: 1,
            hidden: 32,
            one_hot_states: true,
            actor: "td3".into(),
            member_indexing: MemberIndexing::PerMember,
            advantage_sum_literal: false,
            aw_independent_z: false,
            z_cache_interval: 1,
            log_every: 500,
            eval_every: 0,
            divergence_threshold: 1e6,
        };
        match variant {
            "vanilla" => Ok(base),
            "aw" => Ok(Self { actor: "awr-iwis".into(), es_samples: 8, ..base }),
            "aware" => Ok(Self {
                actor: "awr-iwis".into(),
                es_samples: 8,
                blocks: 4,
                batch_i: 1,
                batch_j: 64,
                ..base
            }),
            other => Err(FbError::Config(format!("unknown variant `{other}`; expected one of {VARIANTS:?}"))),
        }
    }

    /// Builds a config from entries in order. The last `variant` entry picks
    /// the preset; every other entry overrides it.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let variant = entries.iter().rev().find(|e| e.key == "variant").map_or("aware", |e| e.value.as_str());
        let mut cfg = Self::preset(variant)?;
        for e in entries.iter().filter(|e| e.key != "variant") {
            cfg.set(&e.key, &e.value)
                .map_err(|err| FbError::Config(format!("line {}: {}", e.line, err_msg(err))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = kv::parse(text, "config")?;
        if entries.iter().any(|e| e.key == "include") {
            return Err(FbError::Config("`include` needs a file path; use TrainConfig::load".into()));
        }
        Self::from_entries(&entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&load_entries(path.as_ref())?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| FbError::Config(format!("cannot parse `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(FbError::Config(format!("`{key}` expects a boolean, got `{v}`"))),
            }
        }
        match key {
            "variant" => *self = Self::preset(value)?,
            "d" => self.d = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "block_sizes" => {
                self.block_sizes = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "gamma" => self.gamma = num(key, value)?,
            "tau_mix" => self.tau_mix = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_actor" => self.lr_actor = num(key, value)?,
            "polyak_zeta" => self.polyak_zeta = num(key, value)?,
            "lambda_ortho" => self.lambda_ortho = num(key, value)?,
            "batch_i" => self.batch_i = num(key, value)?,
            "batch_j" => self.batch_j = num(key, value)?,
            "ensemble_m" => self.ensemble_m = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "es_samples" => self.es_samples = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "one_hot_states" => self.one_hot_states = flag(key, value)?,
            "actor" => self.actor = value.to_string(),
            "member_indexing" => self.member_indexing = MemberIndexing::parse(value)?,
            "advantage_sum_literal" => self.advantage_sum_literal = flag(key, value)?,
            "aw_independent_z" => self.aw_independent_z = flag(key, value)?,
            "z_cache_interval" => self.z_cache_interval = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "divergence_threshold" => self.divergence_threshold = num(key, value)?,
            other => return Err(FbError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        if self.block_sizes.is_empty() {
            BlockLayout::equal(self.d, self.blocks)
        } else {
            let l = BlockLayout::explicit(self.block_sizes.clone())?;
            if l.d() != self.d || l.k() != self.blocks {
                return Err(FbError::Config(format!(
                    "block_sizes {:?} disagree with d={} and blocks={}",
                    self.block_sizes, self.d, self.blocks
                )));
            }
            Ok(l)
        }
    }

    /// Whether each group shares one `z` and `B` reads it.
    pub fn grouped(&self) -> bool {
        self.variant == "aware"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FbError::Config(m));
        if !VARIANTS.contains(&self.variant.as_str()) {
            return bad(format!("unknown variant `{}`", self.variant));
        }
        self.layout().map_err(|e| FbError::Config(err_msg(e)))?;
        if self.variant != "aware" && self.blocks != 1 {
            return bad(format!("variant {} needs blocks = 1, got {}", self.variant, self.blocks));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau_mix) {
            return bad(format!("tau_mix {} outside [0, 1]", self.tau_mix));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr_actor > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.polyak_zeta) {
            return bad(format!("polyak_zeta {} outside [0, 1]", self.polyak_zeta));
        }
        if self.lambda_ortho < 0.0 {
            return bad("lambda_ortho must be non-negative".into());
        }
        if self.batch_i * self.batch_j < 2 {
            return bad(format!("batch_i·batch_j = {} but the loss needs at least 2", self.batch_i * self.batch_j));
        }
        if self.grouped() && self.batch_j < 2 {
            return bad("grouped variants need batch_j ≥ 2 for within-group pairs".into());
        }
        if self.ensemble_m == 0 || self.es_samples == 0 || self.hidden == 0 || self.z_cache_interval == 0 {
            return bad("ensemble_m, es_samples, hidden and z_cache_interval must be ≥ 1".into());
        }
        if !crate::policy_opt::ACTOR_OBJECTIVES.contains(&self.actor.as_str()) {
            return bad(format!(
                "unknown actor `{}`; expected one of {:?}",
                self.actor,
                crate::policy_opt::ACTOR_OBJECTIVES
            ));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive".into());
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let sizes: Vec<String> = self.block_sizes.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", self.variant.clone());
        put("d", self.d.to_string());
        put("blocks", self.blocks.to_string());
        put("block_sizes", sizes.join(","));
        put("gamma", fmt_f(self.gamma));
        put("tau_mix", fmt_f(self.tau_mix));
        put("beta", fmt_f(self.beta));
        put("lr", fmt_f(self.lr));
        put("lr_actor", fmt_f(self.lr_actor));
        put("polyak_zeta", fmt_f(self.polyak_zeta));
        put("lambda_ortho", fmt_f(self.lambda_ortho));
        put("batch_i", self.batch_i.to_string());
        put("batch_j", self.batch_j.to_string());
        put("ensemble_m", self.ensemble_m.to_string());
        put("steps", self.steps.to_string());
        put("seed", self.seed.to_string());
        put("es_samples", self.es_samples.to_string());
        put("hidden", self.hidden.to_string());
        put("one_hot_states", self.one_hot_states.to_string());
        put("actor", self.actor.clone());
        put("member_indexing", self.member_indexing.name().to_string());
        put("advantage_sum_literal", self.advantage_sum_literal.to_string());
        put("aw_independent_z", self.aw_independent_z.to_string());
        put("z_cache_interval", self.z_cache_interval.to_string());
        put("log_every", self.log_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("divergence_threshold", fmt_f(self.divergence_threshold));
        s
    }

    /// Hex sha256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn err_msg(e: FbError) -> String {
    match e {
        FbError::Config(m) | FbError::Contract(m) => m,
        other => other.to_string(),
    }
}

/// Reads a config file, splicing `include = path` entries (relative to the
/// including file) in place.
pub fn load_entries(path: &Path) -> Result<Vec<Entry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    load_into(path, &mut seen, &mut out, 0)?;
    Ok(out)
}

fn load_into(path: &Path, seen: &mut BTreeSet<PathBuf>, out: &mut Vec<Entry>, depth: usize) -> Result<()> {
    if depth > 16 {
        return Err(FbError::Config(format!("include nesting too deep at {}", path.display())));
    }
    let canon = path.canonicalize().map_err(|e| FbError::io(path, e))?;
    if !seen.insert(canon.clone()) {
        return Err(FbError::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
    for e in kv::parse(&text, &path.display().to_string())? {
        if e.key == "include" {
            let base = canon.parent().unwrap_or_else(|| Path::new("."));
            load_into(&base.join(&e.value), seen, out, depth + 1)?;
        } else {
            out.push(e);
        }
    }
    seen.remove(&canon);
    Ok(())
}
