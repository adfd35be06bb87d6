use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every cache-sharing scheme the laboratory knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Every layer stores its own cache (multi-head attention).
    Vanilla,
    /// Every layer stores its own cache; fewer KV heads than query heads.
    Gqa,
    /// Odd layers store, each even layer reuses the layer below.
    Cla,
    /// Bottom half stores, top half reuses layer `L/2`.
    Yoco,
    /// Top layers fuse layer 1 and layer `n` with learnable vectors.
    FusedKv,
    /// Top layers take keys from layer `n` and values from layer 1.
    FusedKvLite,
    /// Keys from layer 1, values from layer `n`.
    FusedKvLiteRev,
    /// Like [`Strategy::FusedKvLite`] with a learnable channel weight per cache.
    FusedKvLiteLearnable,
    /// Top layers fuse every bottom layer with learnable scalars.
    DenseFusion,
    /// Direct reuse with explicit value and key source layers (`value5key8`).
    SourceIndex { value: usize, key: usize },
}

impl Strategy {
    /// The named strategies exercised by the acceptance suite.
    pub const CATALOG: [Strategy; 9] = [
        Strategy::Vanilla,
        Strategy::Gqa,
        Strategy::Cla,
        Strategy::Yoco,
        Strategy::FusedKv,
        Strategy::FusedKvLite,
        Strategy::FusedKvLiteRev,
        Strategy::FusedKvLiteLearnable,
        Strategy::DenseFusion,
    ];

    pub fn has_fusion_weights(self) -> bool {
        matches!(
            self,
            Strategy::FusedKv | Strategy::FusedKvLiteLearnable | Strategy::DenseFusion
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Vanilla => f.write_str("Vanilla"),
            Strategy::Gqa => f.write_str("GQA"),
            Strategy::Cla => f.write_str("CLA"),
            Strategy::Yoco => f.write_str("YOCO"),
            Strategy::FusedKv => f.write_str("FusedKV"),
            Strategy::FusedKvLite => f.write_str("FusedKV-Lite"),
            Strategy::FusedKvLiteRev => f.write_str("FusedKV-Lite-Rev"),
            Strategy::FusedKvLiteLearnable => f.write_str("FusedKV-Lite-Learnable"),
            Strategy::DenseFusion => f.write_str("DenseFusion"),
            Strategy::SourceIndex { value, key } => write!(f, "value{value}key{key}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        let strategy = match norm.as_str() {
            "vanilla" | "mha" => Strategy::Vanilla,
            "gqa" => Strategy::Gqa,
            "cla" => Strategy::Cla,
            "yoco" => Strategy::Yoco,
            "fusedkv" => Strategy::FusedKv,
            "fusedkvlite" | "lite" => Strategy::FusedKvLite,
            "fusedkvliterev" | "literev" => Strategy::FusedKvLiteRev,
            "fusedkvlitelearnable" | "litelearnable" => Strategy::FusedKvLiteLearnable,
            "densefusion" | "dense" => Strategy::DenseFusion,
            other => parse_source_index(other).ok_or_else(|| Error::UnknownStrategy(s.to_string()))?,
        };
        Ok(strategy)
    }
}

fn parse_source_index(s: &str) -> Option<Strategy> {
    let rest = s.strip_prefix("value")?;
    let (v, k) = rest.split_once("key")?;
    Some(Strategy::SourceIndex {
        value: v.parse().ok()?,
        key: k.parse().ok()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Scalar,
    /// One entry per head-dimension channel, shared across heads and positions.
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reconstruction {
    /// Selector: each cache is taken unchanged from a single source layer.
    DirectReuse,
    /// Elementwise-weighted sum over the source layers.
    WeightedFusion(Granularity),
}

/// How one reconstruction layer obtains its keys and values. Layer indices
/// are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionRule {
    pub layer: usize,
    pub kind: Reconstruction,
    pub key_sources: Vec<usize>,
    pub value_sources: Vec<usize>,
}

impl ReconstructionRule {
    /// `Φ(i)`: every storage layer read by this rule, ascending.
    pub fn sources(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.key_sources.iter().chain(&self.value_sources).copied().collect();
        set.into_iter().collect()
    }
}

/// Partition of layers `1..=L` into storage and reconstruction layers, with
/// the source mapping of each reconstruction layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    strategy: Strategy,
    num_layers: usize,
    storage: Vec<usize>,
    rules: Vec<ReconstructionRule>,
}

impl SharingPlan {
    /// Validates the partition. Every source must be a storage layer below
    /// its target, so evaluating layers in order never reads a cache that
    /// has not been produced yet.
    pub fn new(
        strategy: Strategy,
        num_layers: usize,
        storage: Vec<usize>,
        mut rules: Vec<ReconstructionRule>,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("plan needs at least one layer".into()));
        }
        rules.sort_by_key(|r| r.layer);
        let storage_set: BTreeSet<usize> = storage.iter().copied().collect();
        if storage_set.len() != storage.len() {
            return Err(Error::Config("duplicate storage layer".into()));
        }
        let mut seen = storage_set.clone();
        for rule in &rules {
            if !seen.insert(rule.layer) {
                return Err(Error::Config(format!("layer {} assigned twice", rule.layer)));
            }
            if rule.key_sources.is_empty() || rule.value_sources.is_empty() {
                return Err(Error::Config(format!("layer {} has no sources", rule.layer)));
            }
            if rule.kind == Reconstruction::DirectReuse
                && (rule.key_sources.len() != 1 || rule.value_sources.len() != 1)
            {
                return Err(Error::Config(format!(
                    "direct reuse at layer {} must read exactly one key and one value source",
                    rule.layer
                )));
            }
            for &j in rule.key_sources.iter().chain(&rule.value_sources) {
                if !storage_set.contains(&j) {
                    return Err(Error::Config(format!(
                        "layer {} reads layer {j}, which is not a storage layer",
                        rule.layer
                    )));
                }
                if j >= rule.layer {
                    return Err(Error::Config(format!(
                        "layer {} reads layer {j}, which is not below it",
                        rule.layer
                    )));
                }
            }
        }
        if seen != (1..=num_layers).collect::<BTreeSet<_>>() {
            return Err(Error::Config(format!(
                "layers {seen:?} do not partition 1..={num_layers}"
            )));
        }
        let mut storage = storage;
        storage.sort_unstable();
        Ok(SharingPlan {
            strategy,
            num_layers,
            storage,
            rules,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn storage_layers(&self) -> &[usize] {
        &self.storage
    }

    pub fn reconstruction_layers(&self) -> Vec<usize> {
        self.rules.iter().map(|r| r.layer).collect()
    }

    pub fn rules(&self) -> &[ReconstructionRule] {
        &self.rules
    }

    pub fn rule(&self, layer: usize) -> Option<&ReconstructionRule> {
        self.rules.iter().find(|r| r.layer == layer)
    }

    pub fn is_storage(&self, layer: usize) -> bool {
        self.storage.binary_search(&layer).is_ok()
    }

    /// `Φ(i)`; empty for storage layers.
    pub fn sources(&self, layer: usize) -> Vec<usize> {
        self.rule(layer).map(ReconstructionRule::sources).unwrap_or_default()
    }

    pub fn has_fusion(&self) -> bool {
        self.rules
            .iter()
            .any(|r| matches!(r.kind, Reconstruction::WeightedFusion(_)))
    }

    /// Union of `Φ(i)` over all reconstruction layers, ascending.
    pub fn all_sources(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rules.iter().flat_map(|r| r.sources()).collect();
        set.into_iter().collect()
    }
}

/// Builds the plan of a named strategy for `num_layers` layers; `middle` is
/// the last storage layer `n` of the FusedKV family and the source-index
/// ablations.
pub fn plan_for_strategy(strategy: Strategy, num_layers: usize, middle: usize) -> Result<SharingPlan> {
    let l = num_layers;
    if l == 0 {
        return Err(Error::Config("plan needs at least one layer".into()));
    }
    let needs_middle = !matches!(
        strategy,
        Strategy::Vanilla | Strategy::Gqa | Strategy::Cla | Strategy::Yoco
    );
    if needs_middle && !(1 <= middle && middle < l) {
        return Err(Error::Config(format!(
            "middle layer {middle} outside 1..{l} for {strategy}"
        )));
    }
    let even = |name: Strategy| {
        if l.is_multiple_of(2) {
            Ok(())
        } else {
            Err(Error::Config(format!("{name} needs an even layer count, got {l}")))
        }
    };
    let bottom: Vec<usize> = (1..=middle).collect();
    let top = middle + 1..=l;
    let rule = |layer, kind, k: Vec<usize>, v: Vec<usize>| ReconstructionRule {
        layer,
        kind,
        key_sources: k,
        value_sources: v,
    };
    let direct = Reconstruction::DirectReuse;
    let n = middle;

    let (storage, rules) = match strategy {
        Strategy::Vanilla | Strategy::Gqa => ((1..=l).collect(), vec![]),
        Strategy::Cla => {
            even(strategy)?;
            (
                (1..=l).step_by(2).collect(),
                (2..=l).step_by(2).map(|i| rule(i, direct, vec![i - 1], vec![i - 1])).collect(),
            )
        }
        Strategy::Yoco => {
            even(strategy)?;
            let half = l / 2;
            (
                (1..=half).collect(),
                (half + 1..=l).map(|i| rule(i, direct, vec![half], vec![half])).collect(),
            )
        }
        Strategy::FusedKv => {
            two_sources(strategy, n)?;
            let fusion = Reconstruction::WeightedFusion(Granularity::Vector);
            (bottom, top.map(|i| rule(i, fusion, vec![1, n], vec![1, n])).collect())
        }
        Strategy::FusedKvLite => (bottom, top.map(|i| rule(i, direct, vec![n], vec![1])).collect()),
        Strategy::FusedKvLiteRev => (bottom, top.map(|i| rule(i, direct, vec![1], vec![n])).collect()),
        Strategy::FusedKvLiteLearnable => {
            let fusion = Reconstruction::WeightedFusion(Granularity::Vector);
            (bottom, top.map(|i| rule(i, fusion, vec![n], vec![1])).collect())
        }
        Strategy::DenseFusion => {
            let fusion = Reconstruction::WeightedFusion(Granularity::Scalar);
            let all = bottom.clone();
            (bottom, top.map(|i| rule(i, fusion, all.clone(), all.clone())).collect())
        }
        Strategy::SourceIndex { value, key } => {
            for (what, j) in [("value", value), ("key", key)] {
                if !(1..=n).contains(&j) {
                    return Err(Error::Config(format!(
                        "{what} source {j} must be a storage layer in 1..={n}"
                    )));
                }
            }
            (bottom, top.map(|i| rule(i, direct, vec![key], vec![value])).collect())
        }
    };
    SharingPlan::new(strategy, l, storage, rules)
}

fn two_sources(strategy: Strategy, middle: usize) -> Result<()> {
    if middle < 2 {
        return Err(Error::Config(format!(
            "{strategy} fuses layer 1 with layer {middle}; middle must be at least 2"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yoco_maps_top_half_to_middle() {
        let plan = plan_for_strategy(Strategy::Yoco, 16, 8).unwrap();
        assert_eq!(plan.storage_layers(), (1..=8).collect::<Vec<_>>());
        for i in 9..=16 {
            assert_eq!(plan.sources(i), vec![8]);
            assert_eq!(plan.rule(i).unwrap().kind, Reconstruction::DirectReuse);
        }
    }

    #[test]
    fn cla_reuses_previous_odd_layer() {
        let plan = plan_for_strategy(Strategy::Cla, 4, 2).unwrap();
        assert_eq!(plan.storage_layers(), &[1, 3]);
        assert_eq!(plan.sources(2), vec![1]);
        assert_eq!(plan.sources(4), vec![3]);
    }

    #[test]
    fn lite_takes_keys_from_middle_values_from_bottom() {
        let plan = plan_for_strategy(Strategy::FusedKvLite, 16, 8).unwrap();
        for i in 9..=16 {
            let r = plan.rule(i).unwrap();
            assert_eq!(r.key_sources, vec![8]);
            assert_eq!(r.value_sources, vec![1]);
            assert_eq!(r.sources(), vec![1, 8]);
        }
        let rev = plan_for_strategy(Strategy::FusedKvLiteRev, 16, 8).unwrap();
        assert_eq!(rev.rule(12).unwrap().key_sources, vec![1]);
        assert_eq!(rev.rule(12).unwrap().value_sources, vec![8]);
    }

    #[test]
    fn fusedkv_and_dense_sources() {
        let plan = plan_for_strategy(Strategy::FusedKv, 8, 4).unwrap();
        assert_eq!(plan.sources(6), vec![1, 4]);
        assert_eq!(
            plan.rule(6).unwrap().kind,
            Reconstruction::WeightedFusion(Granularity::Vector)
        );
        let dense = plan_for_strategy(Strategy::DenseFusion, 8, 4).unwrap();
        assert_eq!(dense.sources(8), vec![1, 2, 3, 4]);
    }

    #[test]
    fn vanilla_has_no_reconstruction() {
        let plan = plan_for_strategy(Strategy::Gqa, 6, 3).unwrap();
        assert!(plan.reconstruction_layers().is_empty());
        assert_eq!(plan.storage_layers().len(), 6);
    }

    #[test]
    fn source_index_ablation() {
        let s: Strategy = "value5key8".parse().unwrap();
        assert_eq!(s, Strategy::SourceIndex { value: 5, key: 8 });
        let plan = plan_for_strategy(s, 16, 8).unwrap();
        assert_eq!(plan.rule(10).unwrap().key_sources, vec![8]);
        assert_eq!(plan.rule(10).unwrap().value_sources, vec![5]);
        assert!(plan_for_strategy(Strategy::SourceIndex { value: 9, key: 8 }, 16, 8).is_err());
    }

    #[test]
    fn errors() {
        assert!(matches!("Nope".parse::<Strategy>(), Err(Error::UnknownStrategy(_))));
        assert!(plan_for_strategy(Strategy::FusedKv, 8, 8).is_err());
        assert!(plan_for_strategy(Strategy::FusedKv, 8, 0).is_err());
        assert!(plan_for_strategy(Strategy::Yoco, 7, 3).is_err());
    }

    #[test]
    fn names_roundtrip() {
        for s in Strategy::CATALOG {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
    }

    #[test]
    fn rejects_forward_reference() {
        let rules = vec![ReconstructionRule {
            layer: 1,
            kind: Reconstruction::DirectReuse,
            key_sources: vec![2],
            value_sources: vec![2],
        }];
        assert!(SharingPlan::new(Strategy::Vanilla, 2, vec![2], rules).is_err());
    }
}
