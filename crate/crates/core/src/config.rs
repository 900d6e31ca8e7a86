//! Modulation configurations, their text labels, and sweep grids.
//!
//! A configuration is written `FAMILY(alpha,beta,REGION,LAYERS)`, e.g.
//! `TupBmask(1.5,0,MBB,All)`: amplify the Mask-BB tokens by 1.5 and mask the
//! remaining visual tokens, in every decoder layer. The identity
//! configuration is written `Baseline`.
//!
//! Numbers use a single canonical spelling so labels round-trip exactly:
//! zero is `0`, every other value is the shortest decimal that parses back
//! to the same `f64`, with a trailing `.0` for integers (`2.0`, `1.75`).

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid {family} configuration: {reason}")]
    Invariant { family: Family, reason: String },
    #[error("label {label:?}, position {position}: {message}")]
    Label {
        label: String,
        position: usize,
        message: String,
    },
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("layer count must be at least 1")]
    NoLayers,
}

/// Which visual tokens form the target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    WholeImg,
    Mask,
    #[serde(rename = "bb")]
    BB,
    MaskBB,
}

impl RegionKind {
    pub const LOCAL: [RegionKind; 3] = [RegionKind::Mask, RegionKind::BB, RegionKind::MaskBB];

    pub fn label(self) -> &'static str {
        match self {
            RegionKind::WholeImg => "WholeImg",
            RegionKind::Mask => "Mask",
            RegionKind::BB => "BB",
            RegionKind::MaskBB => "MBB",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "WholeImg" => RegionKind::WholeImg,
            "Mask" => RegionKind::Mask,
            "BB" => RegionKind::BB,
            "MBB" => RegionKind::MaskBB,
            _ => return None,
        })
    }

    pub fn is_local(self) -> bool {
        self != RegionKind::WholeImg
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Decoder layers the modulation is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Early,
    Middle,
    Late,
    All,
}

impl LayerGroup {
    pub const ALL_GROUPS: [LayerGroup; 4] = [
        LayerGroup::Early,
        LayerGroup::Middle,
        LayerGroup::Late,
        LayerGroup::All,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LayerGroup::Early => "Early",
            LayerGroup::Middle => "Middle",
            LayerGroup::Late => "Late",
            LayerGroup::All => "All",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "Early" => LayerGroup::Early,
            "Middle" => LayerGroup::Middle,
            "Late" => LayerGroup::Late,
            "All" => LayerGroup::All,
            _ => return None,
        })
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Decoder layer indices for a group out of `n_layers`.
///
/// Early, Middle and Late are the thirds `[0, ⌈n/3⌉)`, `[⌈n/3⌉, ⌈2n/3⌉)` and
/// `[⌈2n/3⌉, n)`; they partition the layers. With fewer than three layers
/// some thirds are empty.
pub fn layer_group_indices(group: LayerGroup, n_layers: usize) -> Result<Vec<usize>, ConfigError> {
    if n_layers == 0 {
        return Err(ConfigError::NoLayers);
    }
    let first = n_layers.div_ceil(3);
    let second = (2 * n_layers).div_ceil(3);
    let range = match group {
        LayerGroup::Early => 0..first,
        LayerGroup::Middle => first..second,
        LayerGroup::Late => second..n_layers,
        LayerGroup::All => 0..n_layers,
    };
    Ok(range.collect())
}

/// Intervention family: T = target tokens, B = background visual tokens;
/// `up`, `down` and `mask` mean amplify, dampen and mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    Tup,
    TupBdown,
    TupBmask,
    Bdown,
    Bmask,
    Whole,
}

impl Family {
    pub const LOCAL: [Family; 5] = [
        Family::Tup,
        Family::TupBdown,
        Family::TupBmask,
        Family::Bdown,
        Family::Bmask,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Baseline => "Baseline",
            Family::Tup => "Tup",
            Family::TupBdown => "TupBdown",
            Family::TupBmask => "TupBmask",
            Family::Bdown => "Bdown",
            Family::Bmask => "Bmask",
            Family::Whole => "Whole",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "Baseline" => Family::Baseline,
            "Tup" => Family::Tup,
            "TupBdown" => Family::TupBdown,
            "TupBmask" => Family::TupBmask,
            "Bdown" => Family::Bdown,
            "Bmask" => Family::Bmask,
            "Whole" => Family::Whole,
            _ => return None,
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One attention intervention. Construct through [`ModulationConfig::new`]
/// or [`ModulationConfig::baseline`] so the family invariants hold.
#[derive(Debug, Clone, Copy)]
pub struct ModulationConfig {
    family: Family,
    alpha: f64,
    beta: f64,
    region: RegionKind,
    layer_group: LayerGroup,
}

impl ModulationConfig {
    pub fn baseline() -> Self {
        Self {
            family: Family::Baseline,
            alpha: 1.0,
            beta: 1.0,
            region: RegionKind::WholeImg,
            layer_group: LayerGroup::All,
        }
    }

    pub fn new(
        family: Family,
        alpha: f64,
        beta: f64,
        region: RegionKind,
        layer_group: LayerGroup,
    ) -> Result<Self, ConfigError> {
        if family == Family::Baseline {
            return Ok(Self::baseline());
        }
        let fail = |reason: String| Err(ConfigError::Invariant { family, reason });
        if !alpha.is_finite() || !beta.is_finite() {
            return fail(format!("non-finite factors ({alpha}, {beta})"));
        }
        match family {
            Family::Whole => {
                if region != RegionKind::WholeImg {
                    return fail(format!("region must be WholeImg, got {region}"));
                }
                if alpha <= 0.0 {
                    return fail(format!("alpha must be > 0, got {alpha}"));
                }
                if beta != 1.0 {
                    return fail(format!("beta must be 1, got {beta}"));
                }
            }
            _ => {
                if !region.is_local() {
                    return fail("targeted families need a local region (Mask, BB, MBB)".into());
                }
                let (alpha_ok, beta_ok) = match family {
                    Family::Tup => (alpha > 1.0, beta == 1.0),
                    Family::TupBdown => (alpha > 1.0, beta > 0.0 && beta < 1.0),
                    Family::TupBmask => (alpha > 1.0, beta == 0.0),
                    Family::Bdown => (alpha == 1.0, beta > 0.0 && beta < 1.0),
                    Family::Bmask => (alpha == 1.0, beta == 0.0),
                    Family::Baseline | Family::Whole => unreachable!(),
                };
                if !alpha_ok {
                    return fail(format!("alpha {alpha} outside the family's range"));
                }
                if !beta_ok {
                    return fail(format!("beta {beta} outside the family's range"));
                }
            }
        }
        Ok(Self {
            family,
            alpha,
            beta,
            region,
            layer_group,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn region(&self) -> RegionKind {
        self.region
    }

    pub fn layer_group(&self) -> LayerGroup {
        self.layer_group
    }

    pub fn is_baseline(&self) -> bool {
        self.family == Family::Baseline
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl PartialEq for ModulationConfig {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.beta.to_bits() == other.beta.to_bits()
            && self.region == other.region
            && self.layer_group == other.layer_group
    }
}

impl Eq for ModulationConfig {}

impl Hash for ModulationConfig {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.family.hash(state);
        self.alpha.to_bits().hash(state);
        self.beta.to_bits().hash(state);
        self.region.hash(state);
        self.layer_group.hash(state);
    }
}

impl PartialOrd for ModulationConfig {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Ordered by label text, the order records are written in.
impl Ord for ModulationConfig {
    fn cmp(&self, other: &Self) -> Ordering {
        self.label().cmp(&other.label())
    }
}

impl fmt::Display for ModulationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_baseline() {
            return f.write_str("Baseline");
        }
        write!(
            f,
            "{}({},{},{},{})",
            self.family,
            format_number(self.alpha),
            format_number(self.beta),
            self.region,
            self.layer_group
        )
    }
}

impl FromStr for ModulationConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_config_label(s)
    }
}

impl Serialize for ModulationConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModulationConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_config_label(&s).map_err(serde::de::Error::custom)
    }
}

/// Canonical number spelling used in labels.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let s = v.to_string();
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn format_config_label(config: &ModulationConfig) -> String {
    config.to_string()
}

/// Parses a label in the canonical grammar. Errors carry the byte position
/// of the offending token.
pub fn parse_config_label(label: &str) -> Result<ModulationConfig, ConfigError> {
    let err = |position: usize, message: String| ConfigError::Label {
        label: label.to_string(),
        position,
        message,
    };
    if label == "Baseline" {
        return Ok(ModulationConfig::baseline());
    }
    let open = label
        .find('(')
        .ok_or_else(|| err(label.len(), "expected '('".into()))?;
    let family = Family::from_label(&label[..open])
        .ok_or_else(|| err(0, format!("unknown family {:?}", &label[..open])))?;
    if family == Family::Baseline {
        return Err(err(open, "Baseline takes no arguments".into()));
    }
    if !label.ends_with(')') {
        return Err(err(label.len(), "expected ')' at end of label".into()));
    }
    let body = &label[open + 1..label.len() - 1];
    let mut fields = Vec::with_capacity(4);
    let mut offset = open + 1;
    for part in body.split(',') {
        fields.push((offset, part));
        offset += part.len() + 1;
    }
    if fields.len() != 4 {
        return Err(err(
            open + 1,
            format!("expected 4 comma-separated fields, found {}", fields.len()),
        ));
    }
    let number = |(pos, text): (usize, &str)| -> Result<f64, ConfigError> {
        let v: f64 = text
            .parse()
            .map_err(|_| err(pos, format!("{text:?} is not a number")))?;
        let canonical = format_number(v);
        if canonical != text {
            return Err(err(pos, format!("non-canonical number {text:?}, write {canonical:?}")));
        }
        Ok(v)
    };
    let alpha = number(fields[0])?;
    let beta = number(fields[1])?;
    let region = RegionKind::from_label(fields[2].1)
        .ok_or_else(|| err(fields[2].0, format!("unknown region {:?}", fields[2].1)))?;
    let layers = LayerGroup::from_label(fields[3].1)
        .ok_or_else(|| err(fields[3].0, format!("unknown layer group {:?}", fields[3].1)))?;
    ModulationConfig::new(family, alpha, beta, region, layers)
}

/// Cartesian description of a configuration sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Target amplification factors, all > 1.
    pub alphas: Vec<f64>,
    /// Background dampening factors in (0, 1). Masking (0) is its own family.
    pub betas_dampen: Vec<f64>,
    /// Local regions for the targeted families.
    pub regions: Vec<RegionKind>,
    pub layer_groups: Vec<LayerGroup>,
    pub families: Vec<Family>,
    #[serde(default = "default_true")]
    pub include_baseline: bool,
}

fn default_true() -> bool {
    true
}

impl SweepGrid {
    /// Six amplification and three dampening factors over Mask, BB and
    /// Mask-BB, four layer groups, whole-image scaling, and the baseline.
    pub fn standard() -> Self {
        Self {
            alphas: vec![1.25, 1.5, 1.75, 2.0, 2.5, 3.0],
            betas_dampen: vec![0.25, 0.5, 0.75],
            regions: RegionKind::LOCAL.to_vec(),
            layer_groups: LayerGroup::ALL_GROUPS.to_vec(),
            families: vec![
                Family::Tup,
                Family::TupBdown,
                Family::TupBmask,
                Family::Bdown,
                Family::Bmask,
                Family::Whole,
            ],
            include_baseline: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Grid(m));
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 1.0)) {
            return bad(format!("alpha {a} must be finite and > 1"));
        }
        if let Some(b) = self.betas_dampen.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return bad(format!("dampening beta {b} must lie in (0, 1)"));
        }
        if self.regions.contains(&RegionKind::WholeImg) {
            return bad("regions lists local regions only; use the Whole family for the whole image".into());
        }
        if self.families.contains(&Family::Baseline) {
            return bad("the baseline is controlled by include_baseline".into());
        }
        if has_duplicates(self.alphas.iter().map(|v| v.to_bits()))
            || has_duplicates(self.betas_dampen.iter().map(|v| v.to_bits()))
            || has_duplicates(self.regions.iter())
            || has_duplicates(self.layer_groups.iter())
            || has_duplicates(self.families.iter())
        {
            return bad("duplicate grid values".into());
        }
        Ok(())
    }
}

fn has_duplicates<T: Ord>(it: impl Iterator<Item = T>) -> bool {
    let mut seen = BTreeSet::new();
    it.into_iter().any(|v| !seen.insert(v))
}

/// Expands a grid into the list of configurations it describes.
///
/// Per local region and layer group: Tup |α|, TupBdown |α|·|β|, TupBmask |α|,
/// Bdown |β|, Bmask 1. Whole scales all visual tokens by every α and every
/// dampening β (|α| + |β| per layer group). The baseline comes first.
pub fn enumerate_configs(grid: &SweepGrid) -> Result<Vec<ModulationConfig>, ConfigError> {
    grid.validate()?;
    let mut out = Vec::new();
    if grid.include_baseline {
        out.push(ModulationConfig::baseline());
    }
    let has = |f: Family| grid.families.contains(&f);
    for &layers in &grid.layer_groups {
        for &region in &grid.regions {
            if has(Family::Tup) {
                for &a in &grid.alphas {
                    out.push(ModulationConfig::new(Family::Tup, a, 1.0, region, layers)?);
                }
            }
            if has(Family::TupBdown) {
                for &a in &grid.alphas {
                    for &b in &grid.betas_dampen {
                        out.push(ModulationConfig::new(Family::TupBdown, a, b, region, layers)?);
                    }
                }
            }
            if has(Family::TupBmask) {
                for &a in &grid.alphas {
                    out.push(ModulationConfig::new(Family::TupBmask, a, 0.0, region, layers)?);
                }
            }
            if has(Family::Bdown) {
                for &b in &grid.betas_dampen {
                    out.push(ModulationConfig::new(Family::Bdown, 1.0, b, region, layers)?);
                }
            }
            if has(Family::Bmask) {
                out.push(ModulationConfig::new(Family::Bmask, 1.0, 0.0, region, layers)?);
            }
        }
        if has(Family::Whole) {
            for &a in grid.alphas.iter().chain(&grid.betas_dampen) {
                out.push(ModulationConfig::new(Family::Whole, a, 1.0, RegionKind::WholeImg, layers)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn standard_grid_has_445_configs() {
        let configs = enumerate_configs(&SweepGrid::standard()).unwrap();
        assert_eq!(configs.len(), 445);
        let unique: HashSet<_> = configs.iter().collect();
        assert_eq!(unique.len(), 445);
        let labels: HashSet<_> = configs.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 445);
    }

    #[test]
    fn small_grids() {
        let mut grid = SweepGrid::standard();
        grid.families.clear();
        assert_eq!(enumerate_configs(&grid).unwrap(), vec![ModulationConfig::baseline()]);

        grid.families = vec![Family::Tup];
        grid.include_baseline = false;
        assert_eq!(enumerate_configs(&grid).unwrap().len(), 72);
    }

    #[test]
    fn invalid_grids() {
        let mut g = SweepGrid::standard();
        g.alphas.push(0.9);
        assert!(enumerate_configs(&g).is_err());
        let mut g = SweepGrid::standard();
        g.betas_dampen.push(0.0);
        assert!(enumerate_configs(&g).is_err());
        let mut g = SweepGrid::standard();
        g.regions.push(RegionKind::Mask);
        assert!(enumerate_configs(&g).is_err());
    }

    #[test]
    fn labels() {
        let c = parse_config_label("TupBmask(1.5,0,MBB,All)").unwrap();
        assert_eq!(c.family(), Family::TupBmask);
        assert_eq!((c.alpha(), c.beta()), (1.5, 0.0));
        assert_eq!(c.region(), RegionKind::MaskBB);
        assert_eq!(c.layer_group(), LayerGroup::All);
        assert_eq!(c.label(), "TupBmask(1.5,0,MBB,All)");

        let c = parse_config_label("TupBdown(2.0,0.75,MBB,Late)").unwrap();
        assert_eq!(c.label(), "TupBdown(2.0,0.75,MBB,Late)");

        assert!(parse_config_label("Baseline").unwrap().is_baseline());
        assert_eq!(ModulationConfig::baseline().label(), "Baseline");
    }

    #[test]
    fn label_errors_carry_position() {
        let e = parse_config_label("TupBmask(1.5,0,MBX,All)").unwrap_err();
        assert!(matches!(e, ConfigError::Label { position: 15, .. }), "{e}");
        let e = parse_config_label("TupBmask(2,0,MBB,All)").unwrap_err();
        assert!(matches!(e, ConfigError::Label { position: 9, .. }), "{e}");
        assert!(parse_config_label("Foo(1.5,0,MBB,All)").is_err());
        assert!(parse_config_label("TupBmask(1.5,0,MBB)").is_err());
        assert!(parse_config_label("TupBmask(1.5,0,MBB,All").is_err());
        // grammatical but violates the family invariant
        assert!(matches!(
            parse_config_label("TupBmask(1.5,0.5,MBB,All)"),
            Err(ConfigError::Invariant { .. })
        ));
    }

    #[test]
    fn family_invariants() {
        use Family::*;
        let ok = |f, a, b, r| ModulationConfig::new(f, a, b, r, LayerGroup::All).is_ok();
        assert!(ok(Whole, 0.5, 1.0, RegionKind::WholeImg));
        assert!(!ok(Whole, 0.0, 1.0, RegionKind::WholeImg));
        assert!(!ok(Whole, 2.0, 1.0, RegionKind::Mask));
        assert!(!ok(Tup, 0.5, 1.0, RegionKind::Mask));
        assert!(!ok(Tup, 1.5, 1.0, RegionKind::WholeImg));
        assert!(ok(Bdown, 1.0, 0.25, RegionKind::BB));
        assert!(!ok(Bdown, 1.0, 0.0, RegionKind::BB));
        assert!(ok(Bmask, 1.0, 0.0, RegionKind::BB));
        assert!(!ok(TupBdown, 1.5, 1.0, RegionKind::BB));
        let b = ModulationConfig::new(Baseline, 3.0, 0.2, RegionKind::Mask, LayerGroup::Late).unwrap();
        assert_eq!(b, ModulationConfig::baseline());
    }

    #[test]
    fn layer_groups() {
        assert_eq!(layer_group_indices(LayerGroup::All, 12).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(layer_group_indices(LayerGroup::Middle, 3).unwrap(), vec![1]);
        assert_eq!(layer_group_indices(LayerGroup::Early, 32).unwrap(), (0..11).collect::<Vec<_>>());
        assert_eq!(layer_group_indices(LayerGroup::Late, 32).unwrap(), (22..32).collect::<Vec<_>>());
        assert_eq!(layer_group_indices(LayerGroup::All, 0), Err(ConfigError::NoLayers));
    }

    proptest! {
        #[test]
        fn thirds_partition_layers(n in 1usize..200) {
            let mut all: Vec<usize> = [LayerGroup::Early, LayerGroup::Middle, LayerGroup::Late]
                .iter()
                .flat_map(|&g| layer_group_indices(g, n).unwrap())
                .collect();
            let len = all.len();
            all.dedup();
            prop_assert_eq!(len, n);
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn label_round_trip(
            family in prop::sample::select(vec![Family::Tup, Family::TupBdown, Family::TupBmask, Family::Bdown, Family::Bmask, Family::Whole]),
            a in 1.0f64..10.0,
            b in 0.0f64..1.0,
            region in prop::sample::select(RegionKind::LOCAL.to_vec()),
            layers in prop::sample::select(LayerGroup::ALL_GROUPS.to_vec()),
        ) {
            let (alpha, beta, region) = match family {
                Family::Tup => (a + 0.01, 1.0, region),
                Family::TupBdown => (a + 0.01, b.max(0.01), region),
                Family::TupBmask => (a + 0.01, 0.0, region),
                Family::Bdown => (1.0, b.max(0.01), region),
                Family::Bmask => (1.0, 0.0, region),
                _ => (a / 3.0, 1.0, RegionKind::WholeImg),
            };
            let c = ModulationConfig::new(family, alpha, beta, region, layers).unwrap();
            let s = format_config_label(&c);
            let back = parse_config_label(&s).unwrap();
            prop_assert_eq!(back, c);
            prop_assert_eq!(format_config_label(&back), s);
        }
    }
}
