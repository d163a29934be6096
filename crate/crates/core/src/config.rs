//! Variant registry: ρ vectors, block widths and profiles.
//!
//! ρ values are exact rationals so that every shortcut width `ρ_k · C̃_k`
//! can be checked for integrality without float drift. On disk they are
//! strings such as `"1/3"` or `"4"`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of backbone blocks, each a candidate shortcut source.
pub const NUM_BLOCKS: usize = 5;

/// Classifier input width of the unmodified backbone head.
pub const BASELINE_WIDTH: usize = 640;

/// Exact non-negative ratio of shortcut channels to block channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rho(Ratio<i64>);

impl Rho {
    pub const ZERO: Rho = Rho(Ratio::new_raw(0, 1));

    pub fn new(numer: i64, denom: i64) -> Result<Self> {
        if denom == 0 {
            return Err(Error::InvalidArgument(format!("rho {numer}/0 has a zero denominator")));
        }
        Ok(Rho(Ratio::new(numer, denom)))
    }

    pub fn integer(v: i64) -> Self {
        Rho(Ratio::from_integer(v))
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0 < Ratio::zero()
    }

    /// `ρ · channels` when it is a whole number.
    pub fn scale(&self, channels: usize) -> Option<usize> {
        let v = self.0 * Ratio::from_integer(channels as i64);
        (v.is_integer() && v >= Ratio::zero()).then(|| v.to_integer() as usize)
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl FromStr for Rho {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse rho `{s}`; expected `n` or `n/d`"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => Rho::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Ok(Rho::integer(s.parse().map_err(|_| bad())?)),
        }
    }
}

impl Serialize for Rho {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Imagenet,
    Tiny,
}

impl Profile {
    /// Channel divisor relative to the full-size backbone.
    pub fn width_divisor(self) -> usize {
        match self {
            Profile::Imagenet => 1,
            Profile::Tiny => 8,
        }
    }

    pub fn default_class_count(self) -> usize {
        match self {
            Profile::Imagenet => 1000,
            Profile::Tiny => 8,
        }
    }

    pub fn default_input_size(self) -> usize {
        match self {
            Profile::Imagenet => 256,
            Profile::Tiny => 64,
        }
    }

    pub fn block_channels(self) -> [usize; NUM_BLOCKS] {
        let d = self.width_divisor();
        [32, 64, 96, 128, 160].map(|c| c / d)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Imagenet => "imagenet",
            Profile::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagenet" => Ok(Profile::Imagenet),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::InvalidArgument(format!(
                "unknown profile `{s}`; expected imagenet or tiny"
            ))),
        }
    }
}

/// Complete description of one model variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub rho: [Rho; NUM_BLOCKS],
    pub block_channels: [usize; NUM_BLOCKS],
    pub class_count: usize,
    pub input_size: usize,
    pub profile: Profile,
}

/// One failed check from [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NegativeRho { block: usize, rho: Rho },
    FractionalWidth { block: usize, rho: Rho, channels: usize },
    EarlyShortcut { block: usize, rho: Rho },
    NoActiveShortcut,
    ZeroChannels { block: usize },
    ZeroClassCount,
    InputSize { size: usize },
    NameWidth { name: String, width: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeRho { block, rho } => write!(f, "rho{block} = {rho} is negative"),
            Violation::FractionalWidth {
                block,
                rho,
                channels,
            } => write!(
                f,
                "rho{block} = {rho} times {channels} channels is not a whole number of channels"
            ),
            Violation::EarlyShortcut { block, rho } => write!(
                f,
                "rho{block} = {rho}: shortcuts from block 1 or 2 need --allow-early-shortcuts"
            ),
            Violation::NoActiveShortcut => write!(f, "at least one rho must be non-zero"),
            Violation::ZeroChannels { block } => write!(f, "block {block} has zero channels"),
            Violation::ZeroClassCount => write!(f, "class_count must be positive"),
            Violation::InputSize { size } => {
                write!(f, "input_size {size} is not a positive multiple of 32")
            }
            Violation::NameWidth { name, width } => write!(
                f,
                "variant `{name}` encodes a classifier width that differs from the computed {width}"
            ),
        }
    }
}

/// `Σ ρ_k · C̃_k`, the classifier input width.
pub fn expand_width(rho: &[Rho], channels: &[usize]) -> Result<usize> {
    if rho.len() != channels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rho values for {} blocks",
            rho.len(),
            channels.len()
        )));
    }
    rho.iter()
        .zip(channels)
        .enumerate()
        .try_fold(0usize, |acc, (k, (r, &c))| {
            if r.is_negative() {
                return Err(Error::InvalidArgument(format!("rho{} = {r} is negative", k + 1)));
            }
            r.scale(c).map(|w| acc + w).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rho{} = {r} times {c} channels is not a whole number",
                    k + 1
                ))
            })
        })
}

impl VariantConfig {
    pub fn classifier_width(&self) -> Result<usize> {
        expand_width(&self.rho, &self.block_channels)
    }

    /// Blocks (1-based) whose ρ is non-zero, ascending.
    pub fn active_blocks(&self) -> Vec<usize> {
        (0..NUM_BLOCKS)
            .filter(|&k| !self.rho[k].is_zero())
            .map(|k| k + 1)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Width encoded in a registry-style name (`exmvit-928`, `exmvit-928-tiny`),
/// expressed at the given profile's scale.
fn width_from_name(name: &str, profile: Profile) -> Option<usize> {
    let rest = name.strip_prefix("exmvit-")?;
    let rest = match profile {
        Profile::Imagenet => rest,
        Profile::Tiny => rest.strip_suffix("-tiny")?,
    };
    let full: usize = rest.parse().ok()?;
    full.is_multiple_of(profile.width_divisor()).then(|| full / profile.width_divisor())
}

/// All violations of `config`; empty means valid. Early (block 1/2)
/// shortcuts are reported unless `allow_early_shortcuts` is set.
pub fn validate_with(config: &VariantConfig, allow_early_shortcuts: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    for k in 0..NUM_BLOCKS {
        let (block, rho, channels) = (k + 1, config.rho[k], config.block_channels[k]);
        if channels == 0 {
            out.push(Violation::ZeroChannels { block });
        }
        if rho.is_negative() {
            out.push(Violation::NegativeRho { block, rho });
        } else if rho.scale(channels).is_none() {
            out.push(Violation::FractionalWidth {
                block,
                rho,
                channels,
            });
        }
        if k < 2 && !rho.is_zero() && !allow_early_shortcuts {
            out.push(Violation::EarlyShortcut { block, rho });
        }
    }
    if config.rho.iter().all(Rho::is_zero) {
        out.push(Violation::NoActiveShortcut);
    }
    if config.class_count == 0 {
        out.push(Violation::ZeroClassCount);
    }
    if config.input_size == 0 || !config.input_size.is_multiple_of(32) {
        out.push(Violation::InputSize {
            size: config.input_size,
        });
    }
    if let (Some(named), Ok(width)) = (
        width_from_name(&config.name, config.profile),
        config.classifier_width(),
    ) {
        if named != width {
            out.push(Violation::NameWidth {
                name: config.name.clone(),
                width,
            });
        }
    }
    out
}

pub fn validate(config: &VariantConfig) -> Vec<Violation> {
    validate_with(config, false)
}

/// Optional changes applied on top of a registered variant.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub class_count: Option<usize>,
    pub input_size: Option<usize>,
    pub profile: Option<Profile>,
    pub rho: Option<[Rho; NUM_BLOCKS]>,
    pub allow_early_shortcuts: bool,
}

fn rho_table(r: [(i64, i64); NUM_BLOCKS]) -> [Rho; NUM_BLOCKS] {
    r.map(|(n, d)| Rho::new(n, d).expect("registry denominators are non-zero"))
}

/// Base variants at the full-size profile.
fn base_variants() -> Vec<(&'static str, [Rho; NUM_BLOCKS])> {
    vec![
        ("mobilevit-s", rho_table([(0, 1), (0, 1), (0, 1), (0, 1), (4, 1)])),
        ("exmvit-576", rho_table([(0, 1), (0, 1), (1, 3), (1, 2), (3, 1)])),
        ("exmvit-640", rho_table([(0, 1), (0, 1), (1, 3), (1, 1), (3, 1)])),
        ("exmvit-704", rho_table([(0, 1), (0, 1), (1, 3), (1, 4), (4, 1)])),
        ("exmvit-864", rho_table([(0, 1), (0, 1), (1, 1), (1, 1), (4, 1)])),
        ("exmvit-928", rho_table([(0, 1), (0, 1), (4, 3), (5, 4), (4, 1)])),
    ]
}

fn make(name: &str, rho: [Rho; NUM_BLOCKS], profile: Profile) -> VariantConfig {
    VariantConfig {
        name: name.to_string(),
        rho,
        block_channels: profile.block_channels(),
        class_count: profile.default_class_count(),
        input_size: profile.default_input_size(),
        profile,
    }
}

/// Immutable name → config map, built once.
pub fn registry() -> &'static BTreeMap<String, VariantConfig> {
    static REGISTRY: OnceLock<BTreeMap<String, VariantConfig>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map = BTreeMap::new();
        for (name, rho) in base_variants() {
            map.insert(name.to_string(), make(name, rho, Profile::Imagenet));
            let tiny = format!("{name}-tiny");
            map.insert(tiny.clone(), make(&tiny, rho, Profile::Tiny));
        }
        map
    })
}

/// Names in table order: full-size variants first, then tiny mirrors.
pub fn registered_names() -> Vec<String> {
    let base = base_variants();
    base.iter()
        .map(|(n, _)| n.to_string())
        .chain(base.iter().map(|(n, _)| format!("{n}-tiny")))
        .collect()
}

/// Looks up `name` and applies `overrides`, revalidating the result.
///
/// A profile override maps onto the other profile's mirror (so
/// `exmvit-928` with profile `tiny` is `exmvit-928-tiny`). A ρ override
/// renames the variant with a `-custom` suffix.
pub fn resolve_variant(name: &str, overrides: &Overrides) -> Result<VariantConfig> {
    let reg = registry();
    let mut config = reg
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownVariant {
            name: name.to_string(),
            valid: registered_names(),
        })?;
    if let Some(profile) = overrides.profile {
        if profile != config.profile {
            let base = name.strip_suffix("-tiny").unwrap_or(name);
            let mirror = match profile {
                Profile::Imagenet => base.to_string(),
                Profile::Tiny => format!("{base}-tiny"),
            };
            config = reg[&mirror].clone();
        }
    }
    if let Some(rho) = overrides.rho {
        if rho != config.rho {
            config.rho = rho;
            config.name = format!("{}-custom", config.name);
        }
    }
    if let Some(c) = overrides.class_count {
        config.class_count = c;
    }
    if let Some(s) = overrides.input_size {
        config.input_size = s;
    }
    check(config, overrides.allow_early_shortcuts)
}

/// Validates a config loaded from outside the registry.
pub fn check(config: VariantConfig, allow_early_shortcuts: bool) -> Result<VariantConfig> {
    let violations = validate_with(&config, allow_early_shortcuts);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(violations.iter().map(|v| v.to_string()).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rho(s: [&str; 5]) -> [Rho; 5] {
        s.map(|v| v.parse().unwrap())
    }

    #[test]
    fn registered_rho_vectors() {
        let get = |n: &str| resolve_variant(n, &Overrides::default()).unwrap().rho;
        assert_eq!(get("exmvit-928"), rho(["0", "0", "4/3", "5/4", "4"]));
        assert_eq!(get("exmvit-864"), rho(["0", "0", "1", "1", "4"]));
        assert_eq!(get("mobilevit-s"), rho(["0", "0", "0", "0", "4"]));
    }

    #[test]
    fn all_registered_variants_validate() {
        for (name, cfg) in registry() {
            assert!(validate(cfg).is_empty(), "{name}: {:?}", validate(cfg));
        }
    }

    #[test]
    fn name_suffix_matches_width() {
        for (name, cfg) in registry() {
            let w = cfg.classifier_width().unwrap();
            let suffix = name
                .strip_prefix("exmvit-")
                .or(name.strip_prefix("mobilevit-s").map(|_| "640"))
                .unwrap();
            let full: usize = suffix.trim_end_matches("-tiny").parse().unwrap();
            assert_eq!(full, w * cfg.profile.width_divisor(), "{name}");
        }
    }

    #[test]
    fn fractional_width_and_input_size_violations() {
        let mut cfg = registry()["exmvit-928"].clone();
        cfg.rho = rho(["0", "0", "1/7", "0", "4"]);
        cfg.name = "custom".into();
        assert!(validate(&cfg)
            .iter()
            .any(|v| matches!(v, Violation::FractionalWidth { block: 3, .. })));
        let mut cfg = registry()["exmvit-928"].clone();
        cfg.input_size = 250;
        assert_eq!(validate(&cfg), vec![Violation::InputSize { size: 250 }]);
    }

    #[test]
    fn early_shortcuts_need_explicit_permission() {
        let mut o = Overrides {
            rho: Some(rho(["1", "0", "0", "0", "4"])),
            ..Default::default()
        };
        let err = resolve_variant("mobilevit-s", &o).unwrap_err();
        assert!(err.to_string().contains("allow-early-shortcuts"));
        o.allow_early_shortcuts = true;
        let cfg = resolve_variant("mobilevit-s", &o).unwrap();
        assert_eq!(cfg.name, "mobilevit-s-custom");
        assert_eq!(cfg.classifier_width().unwrap(), 672);
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = resolve_variant("exmvit-999", &Overrides::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exmvit-928") && msg.contains("mobilevit-s"));
    }

    #[test]
    fn profile_override_selects_mirror() {
        let o = Overrides {
            profile: Some(Profile::Tiny),
            ..Default::default()
        };
        let cfg = resolve_variant("exmvit-928", &o).unwrap();
        assert_eq!(cfg.name, "exmvit-928-tiny");
        assert_eq!(cfg.block_channels, [4, 8, 12, 16, 20]);
        assert_eq!(cfg.classifier_width().unwrap(), 116);
    }

    #[test]
    fn negative_and_malformed_rho() {
        assert!("-1/3".parse::<Rho>().unwrap().is_negative());
        assert!("1/0".parse::<Rho>().is_err());
        assert!("abc".parse::<Rho>().is_err());
        assert!(expand_width(&rho(["0", "0", "-1/3", "0", "4"]), &[32, 64, 96, 128, 160]).is_err());
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let mut v: serde_json::Value =
            serde_json::from_str(&registry()["exmvit-640"].to_json()).unwrap();
        assert_eq!(v["rho"], serde_json::json!(["0", "0", "1/3", "1", "3"]));
        v["extra"] = serde_json::json!(1);
        assert!(VariantConfig::from_json(&v.to_string()).is_err());
    }
}
