//! Sample and domain types, age binning, deterministic splits, and
//! training-budget equalisation.

mod manifest;
mod synth;

pub use manifest::{load_manifest, write_manifest, LoadedManifest};
pub use synth::{synthesize_dataset, SynthSpec};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgedgError, Result};

/// The eight emotion categories, in their stable index order 0..=7.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmotionClass {
    Neutral,
    Happy,
    Sad,
    Surprise,
    Fear,
    Disgust,
    Anger,
    Contempt,
}

pub const EMOTION_CLASS_COUNT: usize = 8;

impl EmotionClass {
    pub const ALL: [EmotionClass; EMOTION_CLASS_COUNT] = [
        EmotionClass::Neutral,
        EmotionClass::Happy,
        EmotionClass::Sad,
        EmotionClass::Surprise,
        EmotionClass::Fear,
        EmotionClass::Disgust,
        EmotionClass::Anger,
        EmotionClass::Contempt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EmotionClass> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Neutral => "Neutral",
            EmotionClass::Happy => "Happy",
            EmotionClass::Sad => "Sad",
            EmotionClass::Surprise => "Surprise",
            EmotionClass::Fear => "Fear",
            EmotionClass::Disgust => "Disgust",
            EmotionClass::Anger => "Anger",
            EmotionClass::Contempt => "Contempt",
        }
    }
}

impl FromStr for EmotionClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .find(|c| c.name().to_ascii_lowercase() == lower)
            .copied()
            .ok_or_else(|| format!("unknown emotion class {s:?}"))
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Age-group domains in ordinal order; adjacency in the ordinal equals
/// adjacency of the underlying age ranges.
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "18-30")]
    A18_30,
    #[serde(rename = "30-40")]
    A30_40,
    #[serde(rename = "40-50")]
    A40_50,
    #[serde(rename = "50-60")]
    A50_60,
    #[serde(rename = "60-85")]
    A60_85,
}

pub const DOMAIN_COUNT: usize = 5;

impl AgeGroup {
    pub const ALL: [AgeGroup; DOMAIN_COUNT] = [
        AgeGroup::A18_30,
        AgeGroup::A30_40,
        AgeGroup::A40_50,
        AgeGroup::A50_60,
        AgeGroup::A60_85,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<AgeGroup> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::A18_30 => "18-30",
            AgeGroup::A30_40 => "30-40",
            AgeGroup::A40_50 => "40-50",
            AgeGroup::A50_60 => "50-60",
            AgeGroup::A60_85 => "60-85",
        }
    }

    /// Age range covered, `[lo, hi)` except the last group which includes
    /// its upper edge.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            AgeGroup::A18_30 => (18.0, 30.0),
            AgeGroup::A30_40 => (30.0, 40.0),
            AgeGroup::A40_50 => (40.0, 50.0),
            AgeGroup::A50_60 => (50.0, 60.0),
            AgeGroup::A60_85 => (60.0, 85.0),
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim();
        Self::ALL
            .iter()
            .find(|g| g.label() == t)
            .copied()
            .ok_or_else(|| format!("unknown age group {t:?}, expected one of 18-30, 30-40, 40-50, 50-60, 60-85"))
    }
}

/// Bins an age into its domain: `[18,30) [30,40) [40,50) [50,60) [60,85]`,
/// the final bin closed on both ends.
pub fn assign_age_group(age: f64) -> Result<AgeGroup> {
    if !age.is_finite() || !(18.0..=85.0).contains(&age) {
        return Err(AgedgError::AgeOutOfRange { age });
    }
    Ok(match age {
        a if a < 30.0 => AgeGroup::A18_30,
        a if a < 40.0 => AgeGroup::A30_40,
        a if a < 50.0 => AgeGroup::A40_50,
        a if a < 60.0 => AgeGroup::A50_60,
        _ => AgeGroup::A60_85,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectAnnotation {
    pub emotion: EmotionClass,
    pub valence: f64,
    pub arousal: f64,
}

impl AffectAnnotation {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("valence", self.valence), ("arousal", self.arousal)] {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(AgedgError::Config(format!(
                    "{name} {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Shape of the per-sample input, shared by every sample in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Vector { dim: usize },
    Image { c: usize, h: usize, w: usize },
}

impl InputShape {
    pub fn len(self) -> usize {
        match self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { c, h, w } => c * h * w,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Flattened input; interpretation is given by the dataset's
    /// [`InputShape`] (row-major `c, h, w` in image mode).
    pub input: Vec<f64>,
    pub apparent_age: f64,
    pub annotation: AffectAnnotation,
    pub domain: AgeGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-domain train/validation/test pools, indexed by age-group ordinal.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub shape: InputShape,
    pub domains: [DomainData; DOMAIN_COUNT],
}

impl DomainSplit {
    pub fn empty(shape: InputShape) -> DomainSplit {
        DomainSplit {
            shape,
            domains: Default::default(),
        }
    }

    pub fn domain(&self, g: AgeGroup) -> &DomainData {
        &self.domains[g.ordinal()]
    }

    pub fn domain_mut(&mut self, g: AgeGroup) -> &mut DomainData {
        &mut self.domains[g.ordinal()]
    }

    pub fn train_sizes(&self) -> [usize; DOMAIN_COUNT] {
        std::array::from_fn(|i| self.domains[i].train.len())
    }

    pub fn total_train_size(&self) -> usize {
        self.train_sizes().iter().sum()
    }

    /// Checks the structural invariants: ids unique across the whole
    /// split and all inputs matching the declared shape.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let want = self.shape.len();
        for g in AgeGroup::ALL {
            let d = self.domain(g);
            for s in d.train.iter().chain(&d.val).chain(&d.test) {
                if !seen.insert(s.id.as_str()) {
                    return Err(AgedgError::DuplicateId { id: s.id.clone() });
                }
                if s.input.len() != want {
                    return Err(AgedgError::ShapeMismatch {
                        context: format!("sample {}", s.id),
                        detail: format!("input length {} != shape length {want}", s.input.len()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One splitmix64 round; derives decorrelated per-purpose RNG seeds from
/// a run seed without consuming shared generator state.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Groups samples by domain and carves deterministic validation/test
/// fractions out of each domain (floor-sized; the remainder trains).
pub fn split_by_domain(
    samples: Vec<Sample>,
    shape: InputShape,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<DomainSplit> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(AgedgError::Config(format!(
            "invalid split fractions val={val_fraction} test={test_fraction}"
        )));
    }
    let mut split = DomainSplit::empty(shape);
    let mut per_domain: [Vec<Sample>; DOMAIN_COUNT] = Default::default();
    for s in samples {
        per_domain[s.domain.ordinal()].push(s);
    }
    for (g, mut pool) in AgeGroup::ALL.into_iter().zip(per_domain) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5101 + g.ordinal() as u64));
        pool.shuffle(&mut rng);
        let n = pool.len();
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let n_test = (n as f64 * test_fraction).floor() as usize;
        let d = split.domain_mut(g);
        d.val = pool.split_off(n.saturating_sub(n_val));
        d.test = pool.split_off(pool.len().saturating_sub(n_test));
        d.train = pool;
    }
    split.validate()?;
    Ok(split)
}

/// Subsamples the training pools of `active` domains so the total comes
/// out at exactly `total_budget`, allocated proportionally to pool size
/// with largest-remainder rounding (ties to the lower ordinal). Inactive
/// domains end up with empty training sets; validation and test sets of
/// every domain pass through untouched.
pub fn equalize_training_budget(
    split: &DomainSplit,
    active: &[AgeGroup],
    total_budget: usize,
    seed: u64,
) -> Result<DomainSplit> {
    let mut is_active = [false; DOMAIN_COUNT];
    for g in active {
        is_active[g.ordinal()] = true;
    }
    let pools: [u64; DOMAIN_COUNT] = std::array::from_fn(|i| {
        if is_active[i] {
            split.domains[i].train.len() as u64
        } else {
            0
        }
    });
    let total: u64 = pools.iter().sum();
    let budget = total_budget as u64;
    if budget > total {
        return Err(AgedgError::Config(format!(
            "training budget {budget} exceeds available pool {total} over active domains"
        )));
    }

    // Integer largest-remainder: quota_i = budget * pool_i / total. The
    // floor never exceeds pool_i, and a +1 is handed out only when the
    // quota was fractional, in which case floor < pool_i holds too.
    let mut alloc = [0u64; DOMAIN_COUNT];
    let mut remainders: Vec<(u64, usize)> = Vec::new();
    if total > 0 {
        for i in 0..DOMAIN_COUNT {
            let num = (budget as u128) * (pools[i] as u128);
            alloc[i] = (num / total as u128) as u64;
            remainders.push(((num % total as u128) as u64, i));
        }
    }
    let assigned: u64 = alloc.iter().sum();
    let mut leftover = budget - assigned;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (rem, i) in remainders {
        if leftover == 0 {
            break;
        }
        if rem > 0 {
            alloc[i] += 1;
            leftover -= 1;
        }
    }
    debug_assert_eq!(alloc.iter().sum::<u64>(), budget);

    let mut out = split.clone();
    for i in 0..DOMAIN_COUNT {
        let d = &mut out.domains[i];
        if !is_active[i] {
            d.train.clear();
            continue;
        }
        let keep = alloc[i] as usize;
        if keep == d.train.len() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB4D6 + i as u64));
        let mut idx = rand::seq::index::sample(&mut rng, d.train.len(), keep).into_vec();
        idx.sort_unstable();
        d.train = idx.into_iter().map(|j| d.train[j].clone()).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binning_boundaries() {
        assert_eq!(assign_age_group(29.9).unwrap(), AgeGroup::A18_30);
        assert_eq!(assign_age_group(30.0).unwrap(), AgeGroup::A30_40);
        assert_eq!(assign_age_group(18.0).unwrap(), AgeGroup::A18_30);
        assert_eq!(assign_age_group(60.0).unwrap(), AgeGroup::A60_85);
        assert_eq!(assign_age_group(85.0).unwrap(), AgeGroup::A60_85);
        assert!(assign_age_group(17.999).is_err());
        assert!(assign_age_group(85.001).is_err());
        assert!(assign_age_group(f64::NAN).is_err());
    }

    #[test]
    fn emotion_index_round_trips_and_parses() {
        for (i, c) in EmotionClass::ALL.into_iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(EmotionClass::from_index(i), Some(c));
            assert_eq!(c.name().parse::<EmotionClass>().unwrap(), c);
            assert_eq!(c.name().to_uppercase().parse::<EmotionClass>().unwrap(), c);
        }
        assert!("joyful".parse::<EmotionClass>().is_err());
        assert_eq!(EmotionClass::Contempt.index(), 7);
    }

    #[test]
    fn age_group_labels_round_trip() {
        for g in AgeGroup::ALL {
            assert_eq!(g.label().parse::<AgeGroup>().unwrap(), g);
            assert_eq!(AgeGroup::from_ordinal(g.ordinal()), Some(g));
        }
        let json = serde_json::to_string(&AgeGroup::A60_85).unwrap();
        assert_eq!(json, "\"60-85\"");
    }

    fn mk_sample(id: &str, age: f64) -> Sample {
        Sample {
            id: id.to_string(),
            input: vec![0.0; 3],
            apparent_age: age,
            annotation: AffectAnnotation {
                emotion: EmotionClass::Neutral,
                valence: 0.0,
                arousal: 0.0,
            },
            domain: assign_age_group(age).unwrap(),
        }
    }

    fn toy_split(pools: [usize; DOMAIN_COUNT]) -> DomainSplit {
        let mut split = DomainSplit::empty(InputShape::Vector { dim: 3 });
        for (g, n) in AgeGroup::ALL.into_iter().zip(pools) {
            let (lo, _) = g.bounds();
            split.domain_mut(g).train = (0..n)
                .map(|i| mk_sample(&format!("{}-{i}", g.label()), lo + 1.0))
                .collect();
        }
        split
    }

    #[test]
    fn budget_symmetric_pools_split_evenly() {
        let split = toy_split([100, 100, 0, 0, 0]);
        let out = equalize_training_budget(
            &split,
            &[AgeGroup::A18_30, AgeGroup::A30_40],
            100,
            7,
        )
        .unwrap();
        assert_eq!(out.train_sizes(), [50, 50, 0, 0, 0]);
    }

    #[test]
    fn budget_identity_when_single_domain_gets_its_pool() {
        let split = toy_split([80, 60, 0, 0, 0]);
        let out = equalize_training_budget(&split, &[AgeGroup::A18_30], 80, 3).unwrap();
        assert_eq!(out.domain(AgeGroup::A18_30).train, split.domain(AgeGroup::A18_30).train);
        assert_eq!(out.domain(AgeGroup::A30_40).train.len(), 0);
    }

    #[test]
    fn budget_shortfall_is_an_error() {
        let split = toy_split([10, 10, 0, 0, 0]);
        let err = equalize_training_budget(&split, &[AgeGroup::A18_30], 11, 0);
        assert!(err.is_err());
    }

    #[test]
    fn budget_inactive_domains_lose_their_train_sets_but_keep_val_test() {
        let mut split = toy_split([10, 10, 10, 0, 0]);
        split.domain_mut(AgeGroup::A40_50).val = vec![mk_sample("v", 45.0)];
        split.domain_mut(AgeGroup::A40_50).test = vec![mk_sample("t", 46.0)];
        let out = equalize_training_budget(
            &split,
            &[AgeGroup::A18_30, AgeGroup::A30_40],
            20,
            0,
        )
        .unwrap();
        assert_eq!(out.domain(AgeGroup::A40_50).train.len(), 0);
        assert_eq!(out.domain(AgeGroup::A40_50).val.len(), 1);
        assert_eq!(out.domain(AgeGroup::A40_50).test.len(), 1);
    }

    #[test]
    fn budget_deterministic_and_sampled_without_replacement() {
        let split = toy_split([37, 23, 11, 5, 41]);
        let a = equalize_training_budget(&split, &AgeGroup::ALL, 60, 99).unwrap();
        let b = equalize_training_budget(&split, &AgeGroup::ALL, 60, 99).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.total_train_size(), 60);
    }

    proptest! {
        #[test]
        fn budget_sums_exactly_and_never_oversamples(
            pools in proptest::array::uniform5(0usize..200),
            seed in any::<u64>(),
            frac in 0.0f64..1.0,
        ) {
            let split = toy_split(pools);
            let total: usize = pools.iter().sum();
            let budget = (total as f64 * frac) as usize;
            let out = equalize_training_budget(&split, &AgeGroup::ALL, budget, seed).unwrap();
            prop_assert_eq!(out.total_train_size(), budget);
            for i in 0..DOMAIN_COUNT {
                prop_assert!(out.domains[i].train.len() <= pools[i]);
            }
        }

        #[test]
        fn binning_matches_bounds(age in 18.0f64..=85.0) {
            let g = assign_age_group(age).unwrap();
            let (lo, hi) = g.bounds();
            prop_assert!(age >= lo);
            if g == AgeGroup::A60_85 {
                prop_assert!(age <= hi);
            } else {
                prop_assert!(age < hi);
            }
        }
    }
}
