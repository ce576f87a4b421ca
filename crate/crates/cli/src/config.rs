//! Flat `key=value` configuration with dotted section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be known
//! to the subcommand that consumes it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use covtune::datagen::GenConfig;
use covtune::experiment::TwinConfig;
use covtune::lstmnet::TrainConfig;
use covtune::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides on top of the file contents.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(self)
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.entries.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))?;
        }
        Ok(())
    }
}

pub const GEN_KEYS: &[&str] = &[
    "steps",
    "lorenz.sigma",
    "lorenz.alpha",
    "lorenz.beta",
    "lorenz.dt",
    "sw.g",
    "sw.b",
    "sw.dt",
    "sw.dx",
    "sw.nx",
    "sw.ny",
    "sw_init.background_h",
    "sw_init.bump_h",
    "sw_init.radius",
];

pub const TRAIN_KEYS: &[&str] = &[
    "train.epochs",
    "train.batch",
    "train.val_fraction",
    "train.patience",
    "train.hidden",
    "train.input_steps",
    "train.lr",
    "train.clip",
];

pub const TWIN_KEYS: &[&str] = &[
    "twin.examples",
    "twin.ensemble",
    "twin.cadence",
    "twin.horizon",
    "twin.q_di01",
    "twin.q_d05",
    "twin.mu",
    "twin.jo_residual",
    "twin.init_spread",
    "twin.q_scale",
    "twin.r_scale",
    "twin.sw_background.background_h",
    "twin.sw_background.bump_h",
    "twin.sw_background.radius",
];

pub fn apply_gen(c: &KvConfig, g: &mut GenConfig) -> Result<()> {
    c.set("steps", &mut g.steps)?;
    c.set("lorenz.sigma", &mut g.lorenz.sigma)?;
    c.set("lorenz.alpha", &mut g.lorenz.alpha)?;
    c.set("lorenz.beta", &mut g.lorenz.beta)?;
    c.set("lorenz.dt", &mut g.lorenz.dt)?;
    c.set("sw.g", &mut g.sw.g)?;
    c.set("sw.b", &mut g.sw.b)?;
    c.set("sw.dt", &mut g.sw.dt)?;
    c.set("sw.dx", &mut g.sw.dx)?;
    c.set("sw.nx", &mut g.sw.nx)?;
    c.set("sw.ny", &mut g.sw.ny)?;
    c.set("sw_init.background_h", &mut g.sw_init.background_h)?;
    c.set("sw_init.bump_h", &mut g.sw_init.bump_h)?;
    c.set("sw_init.radius", &mut g.sw_init.radius)
}

pub fn apply_train(c: &KvConfig, t: &mut TrainConfig) -> Result<()> {
    c.set("train.epochs", &mut t.epochs)?;
    c.set("train.batch", &mut t.batch)?;
    c.set("train.val_fraction", &mut t.val_fraction)?;
    c.set("train.patience", &mut t.patience)?;
    c.set("train.hidden", &mut t.hidden)?;
    c.set("train.lr", &mut t.lr)?;
    if c.entries.contains_key("train.input_steps") {
        let mut n = 0usize;
        c.set("train.input_steps", &mut n)?;
        t.input_steps = Some(n);
    }
    if let Some(v) = c.entries.get("train.clip") {
        t.clip = match v.as_str() {
            "none" | "off" => None,
            _ => {
                let mut x = 0.0;
                c.set("train.clip", &mut x)?;
                Some(x)
            }
        };
    }
    Ok(())
}

/// Applies generator keys (the truth model) and `twin.*` keys.
pub fn apply_twin(c: &KvConfig, t: &mut TwinConfig) -> Result<()> {
    let mut g = t.gen_config();
    apply_gen(c, &mut g)?;
    t.horizon = g.steps;
    t.lorenz = g.lorenz;
    t.sw = g.sw;
    t.sw_truth = g.sw_init;
    c.set("twin.examples", &mut t.examples)?;
    c.set("twin.ensemble", &mut t.ensemble)?;
    c.set("twin.cadence", &mut t.cadence)?;
    c.set("twin.horizon", &mut t.horizon)?;
    c.set("twin.q_di01", &mut t.q_di01)?;
    c.set("twin.q_d05", &mut t.q_d05)?;
    c.set("twin.mu", &mut t.mu)?;
    c.set("twin.init_spread", &mut t.init_spread)?;
    c.set("twin.q_scale", &mut t.q_scale)?;
    c.set("twin.r_scale", &mut t.r_scale)?;
    c.set("twin.sw_background.background_h", &mut t.sw_background.background_h)?;
    c.set("twin.sw_background.bump_h", &mut t.sw_background.bump_h)?;
    c.set("twin.sw_background.radius", &mut t.sw_background.radius)?;
    if let Some(v) = c.entries.get("twin.jo_residual") {
        t.jo_residual = match v.as_str() {
            "analysis" => covtune::assim::JoResidual::Analysis,
            "background" => covtune::assim::JoResidual::Background,
            _ => return Err(Error::Config(format!("invalid value `{v}` for `twin.jo_residual`"))),
        };
    }
    Ok(())
}

pub fn render_gen(g: &GenConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "steps={}", g.steps);
    let _ = writeln!(s, "lorenz.sigma={}", g.lorenz.sigma);
    let _ = writeln!(s, "lorenz.alpha={}", g.lorenz.alpha);
    let _ = writeln!(s, "lorenz.beta={}", g.lorenz.beta);
    let _ = writeln!(s, "lorenz.dt={}", g.lorenz.dt);
    let _ = writeln!(s, "sw.g={}", g.sw.g);
    let _ = writeln!(s, "sw.b={}", g.sw.b);
    let _ = writeln!(s, "sw.dt={}", g.sw.dt);
    let _ = writeln!(s, "sw.dx={}", g.sw.dx);
    let _ = writeln!(s, "sw.nx={}", g.sw.nx);
    let _ = writeln!(s, "sw.ny={}", g.sw.ny);
    let _ = writeln!(s, "sw_init.background_h={}", g.sw_init.background_h);
    let _ = writeln!(s, "sw_init.bump_h={}", g.sw_init.bump_h);
    let _ = writeln!(s, "sw_init.radius={}", g.sw_init.radius);
    s
}

pub fn render_train(t: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "train.epochs={}", t.epochs);
    let _ = writeln!(s, "train.batch={}", t.batch);
    let _ = writeln!(s, "train.val_fraction={}", t.val_fraction);
    let _ = writeln!(s, "train.patience={}", t.patience);
    let _ = writeln!(s, "train.hidden={}", t.hidden);
    if let Some(n) = t.input_steps {
        let _ = writeln!(s, "train.input_steps={n}");
    }
    let _ = writeln!(s, "train.lr={}", t.lr);
    match t.clip {
        Some(c) => {
            let _ = writeln!(s, "train.clip={c}");
        }
        None => s.push_str("train.clip=none\n"),
    }
    s
}

pub fn render_twin(t: &TwinConfig) -> String {
    let mut s = render_gen(&t.gen_config());
    let _ = writeln!(s, "twin.examples={}", t.examples);
    let _ = writeln!(s, "twin.ensemble={}", t.ensemble);
    let _ = writeln!(s, "twin.cadence={}", t.cadence);
    let _ = writeln!(s, "twin.horizon={}", t.horizon);
    let _ = writeln!(s, "twin.q_di01={}", t.q_di01);
    let _ = writeln!(s, "twin.q_d05={}", t.q_d05);
    let _ = writeln!(s, "twin.mu={}", t.mu);
    let jo = match t.jo_residual {
        covtune::assim::JoResidual::Analysis => "analysis",
        covtune::assim::JoResidual::Background => "background",
    };
    let _ = writeln!(s, "twin.jo_residual={jo}");
    let _ = writeln!(s, "twin.init_spread={}", t.init_spread);
    let _ = writeln!(s, "twin.q_scale={}", t.q_scale);
    let _ = writeln!(s, "twin.r_scale={}", t.r_scale);
    let _ = writeln!(s, "twin.sw_background.background_h={}", t.sw_background.background_h);
    let _ = writeln!(s, "twin.sw_background.bump_h={}", t.sw_background.bump_h);
    let _ = writeln!(s, "twin.sw_background.radius={}", t.sw_background.radius);
    s
}
