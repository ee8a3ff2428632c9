//! Run configuration: a flat `key = value` document with defaults for every
//! key, validation, and a canonical echo whose digest identifies the run.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::hin::SplitPolicy;
use crate::proto::ClConfig;

/// Which parts of the model are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub explicit: bool,
    pub implicit: bool,
    pub fusion: FusionMode,
}

impl Variant {
    pub const FULL: Variant = Variant {
        explicit: true,
        implicit: true,
        fusion: FusionMode::Attention,
    };

    /// Both views are present, so the cross-view contrastive term exists.
    pub fn has_contrast(&self) -> bool {
        self.explicit && self.implicit
    }
}

/// Ablation names in report order.
pub const ABLATIONS: [&str; 6] = ["w/-er", "w/-ir", "w/o-cl", "w/o-att:⊕", "w/o-att:+", "full"];

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim_input: usize,
    pub dim_hidden: usize,
    pub dim_fused: usize,
    pub layers_er: usize,
    pub layers_ir: usize,
    pub hops: usize,
    pub channels: usize,
    pub bases: usize,
    pub cl: ClConfig,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub only_er: bool,
    pub only_ir: bool,
    pub fusion: FusionMode,
    pub split: SplitPolicy,
    pub interaction: String,
    pub feature_scale: f64,
    pub eval_negatives: usize,
    pub ks: Vec<usize>,
    pub data: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim_input: 64,
            dim_hidden: 64,
            dim_fused: 64,
            layers_er: 2,
            layers_ir: 2,
            hops: 4,
            channels: 2,
            bases: 10,
            cl: ClConfig::default(),
            beta: 0.25,
            lambda: 1e-4,
            lr: 0.005,
            batch: 1024,
            epochs: 100,
            patience: 10,
            seed: 0,
            only_er: false,
            only_ir: false,
            fusion: FusionMode::Attention,
            split: SplitPolicy::LeaveOneOut,
            interaction: "click".into(),
            feature_scale: 0.1,
            eval_negatives: 99,
            ks: vec![5, 10, 20],
            data: None,
            features: None,
        }
    }
}

/// Keys in echo order.
pub const KEYS: [&str; 31] = [
    "d0",
    "d1",
    "d_fused",
    "layers_er",
    "layers_ir",
    "hops",
    "channels",
    "bases",
    "prototypes_user",
    "prototypes_concept",
    "tau",
    "alpha_u",
    "alpha_k",
    "cl_sub_batch",
    "beta",
    "lambda",
    "lr",
    "batch",
    "epochs",
    "patience",
    "seed",
    "only_er",
    "only_ir",
    "fusion",
    "split",
    "interaction",
    "feature_scale",
    "eval_negatives",
    "ks",
    "data",
    "features",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn variant(&self) -> Variant {
        Variant {
            explicit: !self.only_ir,
            implicit: !self.only_er,
            fusion: self.fusion,
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d0" => self.dim_input = parse_num(key, v)?,
            "d1" => self.dim_hidden = parse_num(key, v)?,
            "d_fused" => self.dim_fused = parse_num(key, v)?,
            "layers_er" => self.layers_er = parse_num(key, v)?,
            "layers_ir" => self.layers_ir = parse_num(key, v)?,
            "hops" => self.hops = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "bases" => self.bases = parse_num(key, v)?,
            "prototypes_user" => self.cl.prototypes_user = parse_num(key, v)?,
            "prototypes_concept" => self.cl.prototypes_concept = parse_num(key, v)?,
            "tau" => self.cl.tau = parse_num(key, v)?,
            "alpha_u" => self.cl.alpha_user = parse_num(key, v)?,
            "alpha_k" => self.cl.alpha_concept = parse_num(key, v)?,
            "cl_sub_batch" => {
                let n: usize = parse_num(key, v)?;
                self.cl.sub_batch = (n > 0).then_some(n);
            }
            "beta" => self.beta = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "only_er" => self.only_er = parse_bool(key, v)?,
            "only_ir" => self.only_ir = parse_bool(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "split" => self.split = v.parse()?,
            "interaction" => self.interaction = v.to_string(),
            "feature_scale" => self.feature_scale = parse_num(key, v)?,
            "eval_negatives" => self.eval_negatives = parse_num(key, v)?,
            "ks" => {
                self.ks = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "features" => self.features = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "d0" => self.dim_input.to_string(),
            "d1" => self.dim_hidden.to_string(),
            "d_fused" => self.dim_fused.to_string(),
            "layers_er" => self.layers_er.to_string(),
            "layers_ir" => self.layers_ir.to_string(),
            "hops" => self.hops.to_string(),
            "channels" => self.channels.to_string(),
            "bases" => self.bases.to_string(),
            "prototypes_user" => self.cl.prototypes_user.to_string(),
            "prototypes_concept" => self.cl.prototypes_concept.to_string(),
            "tau" => format!("{:?}", self.cl.tau),
            "alpha_u" => format!("{:?}", self.cl.alpha_user),
            "alpha_k" => format!("{:?}", self.cl.alpha_concept),
            "cl_sub_batch" => self.cl.sub_batch.unwrap_or(0).to_string(),
            "beta" => format!("{:?}", self.beta),
            "lambda" => format!("{:?}", self.lambda),
            "lr" => format!("{:?}", self.lr),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "only_er" => self.only_er.to_string(),
            "only_ir" => self.only_ir.to_string(),
            "fusion" => self.fusion.to_string(),
            "split" => self.split.to_string(),
            "interaction" => self.interaction.clone(),
            "feature_scale" => format!("{:?}", self.feature_scale),
            "eval_negatives" => self.eval_negatives.to_string(),
            "ks" => self.ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "data" => p(&self.data),
            "features" => p(&self.features),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Parses a `key = value` document over the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    /// The report name of an ablation, resolving the spelled-out aliases.
    pub fn canonical_ablation(name: &str) -> Result<&'static str> {
        match name {
            "w/o-att:concat" => Ok("w/o-att:⊕"),
            "w/o-att:add" => Ok("w/o-att:+"),
            _ => ABLATIONS.iter().copied().find(|&a| a == name).ok_or_else(|| {
                Error::Config(format!("unknown ablation `{name}` (expected one of {})", ABLATIONS.join(", ")))
            }),
        }
    }

    /// Applies an ablation name (`full`, `w/-er`, `w/-ir`, `w/o-cl`,
    /// `w/o-att:⊕`, `w/o-att:+`; `concat` and `add` spell the last two).
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        self.only_er = false;
        self.only_ir = false;
        self.fusion = FusionMode::Attention;
        match name {
            "full" => {}
            "w/-er" => self.only_er = true,
            "w/-ir" => self.only_ir = true,
            "w/o-cl" => self.beta = 0.0,
            "w/o-att:⊕" | "w/o-att:concat" => self.fusion = FusionMode::Concat,
            "w/o-att:+" | "w/o-att:add" => self.fusion = FusionMode::Add,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation `{name}` (expected one of {})",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d0", self.dim_input),
            ("d1", self.dim_hidden),
            ("d_fused", self.dim_fused),
            ("layers_er", self.layers_er),
            ("layers_ir", self.layers_ir),
            ("hops", self.hops),
            ("channels", self.channels),
            ("bases", self.bases),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("eval_negatives", self.eval_negatives),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be at least 1")));
        }
        if !(1..=8).contains(&self.channels) {
            return Err(Error::Config(format!("`channels` must be in 1..=8, got {}", self.channels)));
        }
        self.cl.validate()?;
        for (k, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config("`feature_scale` must be positive".into()));
        }
        if self.only_er && self.only_ir {
            return Err(Error::Config("`only_er` and `only_ir` cannot both be set".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("`ks` must list cutoffs >= 1".into()));
        }
        Ok(())
    }

    /// Every resolved key, one `key = value` per line, in fixed order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("known key")).expect("string write");
        }
        s
    }

    /// SHA-256 of the echo, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.echo().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("tau", "0.3").unwrap();
        cfg.set("ks", "1,3").unwrap();
        cfg.set("cl_sub_batch", "8").unwrap();
        cfg.set("data", "/tmp/x").unwrap();
        cfg.set("split", "ratio:0.8").unwrap();
        let again = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        assert_ne!(RunConfig::default().digest(), cfg.digest());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("d0 = 8\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::parse("d0 8").is_err());
        assert!(RunConfig::parse("d0 = x").is_err());
    }

    #[test]
    fn ablations_map_to_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_ablation("w/o-cl").unwrap();
        assert_eq!(cfg.beta, 0.0);
        cfg.apply_ablation("w/-er").unwrap();
        assert!(cfg.only_er && !cfg.variant().implicit);
        cfg.apply_ablation("w/o-att:⊕").unwrap();
        assert_eq!(cfg.fusion, FusionMode::Concat);
        assert!(!cfg.only_er);
        cfg.apply_ablation("w/o-att:add").unwrap();
        assert_eq!(cfg.fusion, FusionMode::Add);
        assert!(cfg.apply_ablation("nope").is_err());
        for name in ABLATIONS {
            RunConfig::default().apply_ablation(name).unwrap();
        }
    }

    #[test]
    fn validation() {
        RunConfig::default().validate().unwrap();
        for (k, v) in [
            ("tau", "0"),
            ("beta", "-1"),
            ("hops", "0"),
            ("channels", "9"),
            ("ks", "0"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}");
        }
        let mut cfg = RunConfig::default();
        cfg.only_er = true;
        cfg.only_ir = true;
        assert!(cfg.validate().is_err());
    }
}
