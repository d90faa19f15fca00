//! Flat `key = value` experiment configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Every key may appear
//! once. `preset = full | desk` selects the base values and may appear
//! anywhere in the file; all other keys are applied on top of it.
//!
//! Defaults (`full` preset): `train.transmissions = 10`,
//! `train.site_rounds = 5`, `train.learning_rate = 1e-4`,
//! `train.batch_size = 64`, `train.threshold = 1.4759`, `train.epsilon = 1`,
//! `train.patch = train.stride = 64`, `train.decay_round = 100`,
//! `train.decay_factor = 0.2`, `train.switch = train.fine_tune = true`,
//! `model.blocks = 3`, `model.channels = 16`, 200/50/50 train/test/
//! characteristic images of 64x64, `data.base_seed = 1000`, `seeds = 0`,
//! `transport = inproc`, `output.dir = out`, `controller.scorer = fallback`,
//! `compare.methods = icp2pfl,fedavg,cl-mi`.
//!
//! The `desk` preset is sized for a laptop: 16/8/8 images of 64x64, 32x32
//! patches, a 2-block 8-channel model, `lr = 0.05`, batch 4, two batches per
//! site-round, `T = 32`, `S = 1`, no decay, institutions `1,2,3` and seeds
//! `0,1,2,3,4`.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;

use icp2p_core::continual::TrainConfig;
use icp2p_core::data::{ProtocolParams, SplitSizes};
use icp2p_core::orchestrator::Method;
use icp2p_core::Architecture;

pub const OUTPUT_DIR_ENV: &str = "ICP2P_OUTPUT_DIR";

/// Where a key's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => write!(f, "command line"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub origin: Option<Origin>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(o) = self.origin {
            write!(f, "{o}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportChoice {
    InProcess,
    /// Empty means loopback on ephemeral ports.
    Socket(Vec<(u32, SocketAddr)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerChoice {
    Fallback,
    /// Pretrained weights as a JSON array of numbers.
    Pam(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub method: Method,
    pub train: TrainConfig,
    pub arch: Architecture,
    pub sizes: SplitSizes,
    /// Dataset seed for run seed `s` is `base_seed + s`.
    pub base_seed: u64,
    pub institutions: Vec<ProtocolParams>,
    pub transport: TransportChoice,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub scorer: ScorerChoice,
    pub compare_methods: Vec<Method>,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                preset,
                method: Method::Icp2pfl,
                train: TrainConfig::default(),
                arch: Architecture::default(),
                sizes: SplitSizes::default(),
                base_seed: 1000,
                institutions: Vec::new(),
                transport: TransportChoice::InProcess,
                output_dir: PathBuf::from("out"),
                seeds: vec![0],
                scorer: ScorerChoice::Fallback,
                compare_methods: vec![Method::Icp2pfl, Method::FedAvg, Method::ClMi],
            },
            Preset::Desk => Self {
                preset,
                train: TrainConfig {
                    learning_rate: 0.05,
                    batch_size: 4,
                    epsilon: 1.0,
                    transmissions: 32,
                    site_rounds: 1,
                    patch: 32,
                    stride: 32,
                    round_batches: Some(2),
                    decay_round: None,
                    ..TrainConfig::default()
                },
                arch: Architecture::new(2, 8),
                sizes: SplitSizes {
                    train: 16,
                    test: 8,
                    characteristic: 8,
                    image_size: 64,
                },
                institutions: (1..=3).map(ProtocolParams::preset).collect(),
                seeds: (0..5).collect(),
                ..Self::preset(Preset::Full)
            },
        }
    }

    pub fn institution_ids(&self) -> Vec<u32> {
        self.institutions.iter().map(|p| p.institution).collect()
    }
}

struct Entry {
    origin: Origin,
    key: String,
    value: String,
}

fn err(origin: Origin, key: &str, message: impl Into<String>) -> ParseError {
    ParseError {
        origin: Some(origin),
        key: Some(key.to_string()),
        message: message.into(),
    }
}

fn canonical(key: &str) -> &str {
    match key {
        "train.sigma" => "train.learning_rate",
        k => k,
    }
}

fn lex(text: &str) -> Result<Vec<Entry>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ParseError {
                origin: Some(origin),
                key: None,
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ParseError {
                origin: Some(origin),
                key: None,
                message: format!("malformed key `{key}`"),
            });
        }
        out.push(Entry {
            origin,
            key: canonical(key).to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(e: &Entry) -> Result<T, ParseError> {
    e.value
        .parse()
        .map_err(|_| err(e.origin, &e.key, format!("`{}` is not a valid number", e.value)))
}

fn optional<T: std::str::FromStr>(e: &Entry) -> Result<Option<T>, ParseError> {
    if e.value == "none" {
        Ok(None)
    } else {
        number(e).map(Some)
    }
}

fn boolean(e: &Entry) -> Result<bool, ParseError> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(err(e.origin, &e.key, format!("expected true or false, found `{v}`"))),
    }
}

fn list<T: std::str::FromStr>(e: &Entry) -> Result<Vec<T>, ParseError> {
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| err(e.origin, &e.key, format!("`{}` is not a valid list item", s.trim())))
        })
        .collect()
}

/// Parses a method name; bare `cl-si` resolves to `si` (later replaced by
/// `method.si_institution` or the first institution).
fn method_name(name: &str, si: u32) -> Option<Method> {
    Some(match name {
        "icp2pfl" => Method::Icp2pfl,
        "fedavg" => Method::FedAvg,
        "cl-mi" => Method::ClMi,
        "cl-si" => Method::ClSi(si),
        "seq-ablation" => Method::SeqAblation,
        other => Method::ClSi(other.strip_prefix("cl-si-")?.parse().ok()?),
    })
}

/// Sentinel for a bare `cl-si` awaiting its institution.
const UNRESOLVED_SI: u32 = u32::MAX;

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ParseError> {
    parse_with_overrides(text, &[])
}

/// Parses `text`, then applies `overrides` (from flags or the environment),
/// which replace file values of the same key.
pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ParseError> {
    let mut entries = lex(text)?;
    let mut seen: BTreeMap<String, Origin> = BTreeMap::new();
    for e in &entries {
        if let Some(first) = seen.insert(e.key.clone(), e.origin) {
            return Err(err(e.origin, &e.key, format!("duplicate key, first set at {first}")));
        }
    }
    for (k, v) in overrides {
        let key = canonical(k.trim()).to_string();
        let entry = Entry {
            origin: Origin::Flag,
            key: key.clone(),
            value: v.trim().to_string(),
        };
        match entries.iter_mut().find(|e| e.key == key) {
            Some(e) => *e = entry,
            None => entries.push(entry),
        }
    }

    let preset = match entries.iter().find(|e| e.key == "preset") {
        None => Preset::Full,
        Some(e) => match e.value.as_str() {
            "full" => Preset::Full,
            "desk" => Preset::Desk,
            v => {
                return Err(err(
                    e.origin,
                    &e.key,
                    format!("unknown preset `{v}`, expected full or desk"),
                ))
            }
        },
    };
    let mut cfg = ExperimentConfig::preset(preset);
    let mut origins: BTreeMap<String, Origin> = BTreeMap::new();
    let mut protocol_overrides: Vec<&Entry> = Vec::new();
    let mut addresses: Vec<(u32, SocketAddr, Origin)> = Vec::new();
    let mut socket = false;
    let mut si_institution: Option<(u32, Origin)> = None;
    let mut pam: Option<Origin> = None;
    let mut pam_weights: Option<(PathBuf, Origin)> = None;

    for e in &entries {
        origins.insert(e.key.clone(), e.origin);
        let t = &mut cfg.train;
        match e.key.as_str() {
            "preset" => {}
            "method" => {
                cfg.method = method_name(&e.value, UNRESOLVED_SI)
                    .ok_or_else(|| err(e.origin, &e.key, format!("unknown method `{}`", e.value)))?
            }
            "method.si_institution" => si_institution = Some((number(e)?, e.origin)),
            "train.learning_rate" => t.learning_rate = number(e)?,
            "train.batch_size" => t.batch_size = number(e)?,
            "train.epsilon" => t.epsilon = number(e)?,
            "train.transmissions" => t.transmissions = number(e)?,
            "train.site_rounds" => t.site_rounds = number(e)?,
            "train.threshold" => t.threshold = number(e)?,
            "train.patch" => t.patch = number(e)?,
            "train.stride" => t.stride = number(e)?,
            "train.round_batches" => t.round_batches = optional(e)?,
            "train.decay_round" => t.decay_round = optional(e)?,
            "train.decay_factor" => t.decay_factor = number(e)?,
            "train.switch" => t.switch = boolean(e)?,
            "train.fine_tune" => t.fine_tune = boolean(e)?,
            "train.psnr_cap" => t.psnr_cap = number(e)?,
            "train.intensity_range" => t.intensity_range = number(e)?,
            "model.blocks" => cfg.arch.blocks = number(e)?,
            "model.channels" => cfg.arch.channels = number(e)?,
            "model.global_residual" => cfg.arch.global_residual = boolean(e)?,
            "data.image_size" => cfg.sizes.image_size = number(e)?,
            "data.train" => cfg.sizes.train = number(e)?,
            "data.test" => cfg.sizes.test = number(e)?,
            "data.characteristic" => cfg.sizes.characteristic = number(e)?,
            "data.base_seed" => cfg.base_seed = number(e)?,
            "institutions" => {
                let ids: Vec<u32> = list(e)?;
                let mut unique = std::collections::BTreeSet::new();
                for id in &ids {
                    if *id == 0 {
                        return Err(err(e.origin, &e.key, "institution ids start at 1"));
                    }
                    if !unique.insert(*id) {
                        return Err(err(e.origin, &e.key, format!("duplicate institution id {id}")));
                    }
                }
                cfg.institutions = ids.into_iter().map(ProtocolParams::preset).collect();
            }
            "transport" => {
                socket = match e.value.as_str() {
                    "inproc" => false,
                    "socket" => true,
                    v => return Err(err(e.origin, &e.key, format!("unknown transport `{v}`"))),
                }
            }
            "output.dir" => cfg.output_dir = PathBuf::from(&e.value),
            "seeds" => cfg.seeds = list(e)?,
            "controller.scorer" => match e.value.as_str() {
                "fallback" => cfg.scorer = ScorerChoice::Fallback,
                "pam" => pam = Some(e.origin),
                v => return Err(err(e.origin, &e.key, format!("unknown scorer `{v}`"))),
            },
            "controller.pam_weights" => pam_weights = Some((PathBuf::from(&e.value), e.origin)),
            "compare.methods" => {
                cfg.compare_methods = e
                    .value
                    .split(',')
                    .map(|m| {
                        method_name(m.trim(), UNRESOLVED_SI)
                            .ok_or_else(|| err(e.origin, &e.key, format!("unknown method `{}`", m.trim())))
                    })
                    .collect::<Result<_, _>>()?
            }
            key => {
                if let Some(rest) = key.strip_prefix("institution.") {
                    if rest.split('.').count() == 2 {
                        protocol_overrides.push(e);
                        continue;
                    }
                }
                if let Some(id) = key.strip_prefix("transport.address.") {
                    let id: u32 = id.parse().map_err(|_| err(e.origin, key, "bad institution id"))?;
                    let addr: SocketAddr = e
                        .value
                        .parse()
                        .map_err(|_| err(e.origin, key, format!("`{}` is not a socket address", e.value)))?;
                    addresses.push((id, addr, e.origin));
                    continue;
                }
                return Err(err(e.origin, key, "unknown key"));
            }
        }
    }

    let ids = cfg.institution_ids();
    let unknown_institution = |origin: Origin, key: &str, id: u32| {
        err(origin, key, format!("institution {id} is not listed in `institutions`"))
    };
    for e in protocol_overrides {
        let (id, field) = e.key["institution.".len()..].split_once('.').unwrap();
        let id: u32 = id.parse().map_err(|_| err(e.origin, &e.key, "bad institution id"))?;
        let Some(p) = cfg.institutions.iter_mut().find(|p| p.institution == id) else {
            return Err(unknown_institution(e.origin, &e.key, id));
        };
        match field {
            "gain" => p.gain = number(e)?,
            "sigma" => p.sigma = number(e)?,
            "window_lo" => p.window_lo = number(e)?,
            "window_hi" => p.window_hi = number(e)?,
            "family" => p.family = number(e)?,
            _ => return Err(err(e.origin, &e.key, "unknown key")),
        }
        p.validate().map_err(|x| err(e.origin, &e.key, x.to_string()))?;
    }

    for &(id, _, origin) in &addresses {
        if !ids.contains(&id) {
            return Err(unknown_institution(origin, &format!("transport.address.{id}"), id));
        }
    }
    if socket {
        if !addresses.is_empty() && addresses.len() != ids.len() {
            return Err(ParseError {
                origin: origins.get("transport").copied(),
                key: Some("transport.address".into()),
                message: "give an address for every institution or none".into(),
            });
        }
        cfg.transport = TransportChoice::Socket(addresses.iter().map(|&(id, a, _)| (id, a)).collect());
    } else if let Some(&(id, _, origin)) = addresses.first() {
        return Err(err(
            origin,
            &format!("transport.address.{id}"),
            "addresses need `transport = socket`",
        ));
    }

    let si = match si_institution {
        Some((id, origin)) if !ids.contains(&id) => {
            return Err(unknown_institution(origin, "method.si_institution", id));
        }
        Some((id, _)) => Some(id),
        None => ids.first().copied(),
    };
    let resolve = |m: Method, key: &str| -> Result<Method, ParseError> {
        match m {
            Method::ClSi(UNRESOLVED_SI) => si.map(Method::ClSi).ok_or_else(|| ParseError {
                origin: origins.get(key).copied(),
                key: Some(key.into()),
                message: "cl-si needs at least one institution".into(),
            }),
            Method::ClSi(id) if !ids.contains(&id) => Err(ParseError {
                origin: origins.get(key).copied(),
                key: Some(key.into()),
                message: format!("institution {id} is not listed in `institutions`"),
            }),
            m => Ok(m),
        }
    };
    cfg.method = resolve(cfg.method, "method")?;
    cfg.compare_methods = cfg
        .compare_methods
        .iter()
        .map(|&m| resolve(m, "compare.methods"))
        .collect::<Result<_, _>>()?;

    match (pam, pam_weights) {
        (Some(_), Some((path, _))) => cfg.scorer = ScorerChoice::Pam(path),
        (Some(origin), None) => {
            return Err(err(
                origin,
                "controller.pam_weights",
                "the pam scorer needs a weights file",
            ));
        }
        (None, Some((_, origin))) => {
            return Err(err(
                origin,
                "controller.pam_weights",
                "weights need `controller.scorer = pam`",
            ));
        }
        (None, None) => {}
    }

    validate(&cfg, &origins)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig, origins: &BTreeMap<String, Origin>) -> Result<(), ParseError> {
    let fail = |key: &str, message: String| ParseError {
        origin: origins.get(key).copied(),
        key: Some(key.to_string()),
        message,
    };
    cfg.train
        .validate()
        .map_err(|e| fail(&format!("train.{}", e.key), e.reason))?;
    if cfg.arch.blocks == 0 {
        return Err(fail("model.blocks", "must be >= 1".into()));
    }
    if cfg.arch.channels == 0 {
        return Err(fail("model.channels", "must be >= 1".into()));
    }
    if cfg.sizes.image_size < icp2p_core::data::MIN_PHANTOM_SIZE {
        return Err(fail(
            "data.image_size",
            format!("must be >= {}", icp2p_core::data::MIN_PHANTOM_SIZE),
        ));
    }
    for (key, n) in [
        ("data.train", cfg.sizes.train),
        ("data.test", cfg.sizes.test),
        ("data.characteristic", cfg.sizes.characteristic),
    ] {
        if n == 0 {
            return Err(fail(key, "must be >= 1".into()));
        }
    }
    if cfg.train.patch > cfg.sizes.image_size {
        return Err(fail("train.patch", "larger than data.image_size".into()));
    }
    if cfg.institutions.is_empty() {
        return Err(fail("institutions", "at least one institution is required".into()));
    }
    let ring = |m: &Method| !matches!(m, Method::ClSi(_) | Method::ClMi);
    if cfg.institutions.len() < 2 && (ring(&cfg.method) || cfg.compare_methods.iter().any(ring)) {
        return Err(fail(
            "institutions",
            "federated methods need at least two institutions".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(fail("seeds", "at least one seed is required".into()));
    }
    if cfg.compare_methods.is_empty() {
        return Err(fail("compare.methods", "at least one method is required".into()));
    }
    Ok(())
}
