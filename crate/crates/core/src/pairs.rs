//! Comparison-based samples built from configuration pairs.
//!
//! Base pairs are unordered and stored with `left_id < right_id`. The mirrored
//! orientation only exists transiently, when a training set is materialized
//! with [`augment_swaps`].

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{ConfigSpace, Configuration};

/// `true` (label 1) iff the left configuration performs strictly better.
pub fn label_of(perf_left: f64, perf_right: f64) -> Result<bool> {
    if !perf_left.is_finite() {
        return Err(Error::NonFinite(perf_left));
    }
    if !perf_right.is_finite() {
        return Err(Error::NonFinite(perf_right));
    }
    Ok(perf_left - perf_right > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Measured,
    Expert,
    Pseudo,
    None,
}

impl LabelSource {
    fn as_str(self) -> &'static str {
        match self {
            LabelSource::Measured => "measured",
            LabelSource::Expert => "expert",
            LabelSource::Pseudo => "pseudo",
            LabelSource::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "measured" => LabelSource::Measured,
            "expert" => LabelSource::Expert,
            "pseudo" => LabelSource::Pseudo,
            "none" => LabelSource::None,
            other => return Err(Error::InvalidArgument(format!("unknown label source `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub left: u64,
    pub right: u64,
}

impl PairKey {
    pub fn new(left: u64, right: u64) -> Self {
        Self { left, right }
    }

    /// The same pair with `left < right`.
    pub fn canonical(self) -> Self {
        if self.left <= self.right {
            self
        } else {
            Self::new(self.right, self.left)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub left_id: u64,
    pub right_id: u64,
    pub features: Vec<f64>,
    pub label: Option<bool>,
    pub source: LabelSource,
}

impl PairSample {
    pub fn key(&self) -> PairKey {
        PairKey::new(self.left_id, self.right_id)
    }

    pub fn with_label(mut self, label: bool, source: LabelSource) -> Self {
        self.label = Some(label);
        self.source = source;
        self
    }

    /// The mirrored sample: endpoints and feature halves swapped, label complemented.
    pub fn swapped(&self) -> PairSample {
        let half = self.features.len() / 2;
        let mut features = Vec::with_capacity(self.features.len());
        features.extend_from_slice(&self.features[half..]);
        features.extend_from_slice(&self.features[..half]);
        PairSample {
            left_id: self.right_id,
            right_id: self.left_id,
            features,
            label: self.label.map(|l| !l),
            source: self.source,
        }
    }
}

/// `encode(left) ∥ encode(right)`.
pub fn encode_pair(space: &ConfigSpace, left: &Configuration, right: &Configuration) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * space.encoded_dim());
    space.encode_into(left, &mut out)?;
    space.encode_into(right, &mut out)?;
    Ok(out)
}

/// Swaps the two halves of a pair feature vector.
pub fn swap_features(features: &[f64]) -> Vec<f64> {
    let half = features.len() / 2;
    features[half..].iter().chain(&features[..half]).copied().collect()
}

/// S_L and S_U.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub labeled: Vec<PairSample>,
    pub unlabeled: Vec<PairSample>,
}

impl PairDataset {
    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Moves the given pairs from S_U to S_L with their labels. Keys that are
    /// not currently unlabeled are an error and leave the dataset unchanged.
    pub fn transfer(&mut self, labels: &[(PairKey, bool)], source: LabelSource) -> Result<()> {
        let wanted: HashMap<PairKey, bool> = labels.iter().copied().collect();
        if wanted.len() != labels.len() {
            return Err(Error::InvalidArgument("duplicate pair in transfer".into()));
        }
        let present = self
            .unlabeled
            .iter()
            .filter(|s| wanted.contains_key(&s.key()))
            .count();
        if present != wanted.len() {
            return Err(Error::State("transfer of a pair that is not unlabeled".into()));
        }
        let mut moved = Vec::with_capacity(labels.len());
        self.unlabeled.retain(|s| match wanted.get(&s.key()) {
            Some(&label) => {
                moved.push(s.clone().with_label(label, source));
                false
            }
            None => true,
        });
        // Keep S_L in the order the labels were given, not S_U order.
        let order: HashMap<PairKey, usize> =
            labels.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
        moved.sort_by_key(|s| order[&s.key()]);
        self.labeled.extend(moved);
        Ok(())
    }

    pub fn unlabeled_index(&self) -> HashMap<PairKey, usize> {
        self.unlabeled.iter().enumerate().map(|(i, s)| (s.key(), i)).collect()
    }

    /// Writes `left_id,right_id,label,source` rows, labeled first.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["left_id", "right_id", "label", "source"])?;
        for s in self.labeled.iter().chain(&self.unlabeled) {
            let label = match s.label {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([
                s.left_id.to_string().as_str(),
                s.right_id.to_string().as_str(),
                label,
                s.source.as_str(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Restores a dump written by [`write_csv`](Self::write_csv), recomputing
    /// features from the configurations.
    pub fn read_csv(reader: impl Read, space: &ConfigSpace, configs: &[Configuration]) -> Result<Self> {
        let by_id: HashMap<u64, &Configuration> = configs.iter().map(|c| (c.id, c)).collect();
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = PairDataset::default();
        for record in rdr.records() {
            let record = record?;
            let id = |i: usize| -> Result<u64> {
                record[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad id `{}`", &record[i])))
            };
            let (l, r) = (id(0)?, id(1)?);
            let cfg = |x: u64| by_id.get(&x).copied().ok_or(Error::Unmeasured(x));
            let features = encode_pair(space, cfg(l)?, cfg(r)?)?;
            let label = match record[2].trim() {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                other => return Err(Error::InvalidArgument(format!("bad label `{other}`"))),
            };
            let source = LabelSource::parse(record[3].trim())?;
            if label.is_some() != (source != LabelSource::None) {
                return Err(Error::InvalidArgument(format!(
                    "pair ({l},{r}): label presence disagrees with source"
                )));
            }
            let sample = PairSample {
                left_id: l,
                right_id: r,
                features,
                label,
                source,
            };
            if label.is_some() {
                out.labeled.push(sample);
            } else {
                out.unlabeled.push(sample);
            }
        }
        Ok(out)
    }
}

/// Every unordered pair of `configs` once, ordered by `(left_id, right_id)`.
/// A pair is labeled iff both endpoints have a measurement.
pub fn build_pairs(
    space: &ConfigSpace,
    configs: &[Configuration],
    measurements: &HashMap<u64, f64>,
) -> Result<PairDataset> {
    let mut ids = HashSet::with_capacity(configs.len());
    for c in configs {
        if !ids.insert(c.id) {
            return Err(Error::DuplicateId(c.id));
        }
    }
    if let Some(stray) = measurements.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Unmeasured(*stray));
    }
    let mut sorted: Vec<&Configuration> = configs.iter().collect();
    sorted.sort_by_key(|c| c.id);
    let encoded: Vec<Vec<f64>> = sorted.iter().map(|c| space.encode(c)).collect::<Result<_>>()?;

    let mut out = PairDataset::default();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let mut features = Vec::with_capacity(2 * space.encoded_dim());
            features.extend_from_slice(&encoded[i]);
            features.extend_from_slice(&encoded[j]);
            let (a, b) = (sorted[i].id, sorted[j].id);
            let mut sample = PairSample {
                left_id: a,
                right_id: b,
                features,
                label: None,
                source: LabelSource::None,
            };
            match (measurements.get(&a), measurements.get(&b)) {
                (Some(pa), Some(pb)) => {
                    sample = sample.with_label(label_of(*pa, *pb)?, LabelSource::Measured);
                    out.labeled.push(sample);
                }
                _ => out.unlabeled.push(sample),
            }
        }
    }
    Ok(out)
}

/// Adds the mirrored sample of every labeled pair whose mirror is absent.
pub fn augment_swaps(dataset: &PairDataset) -> PairDataset {
    let present: HashSet<PairKey> = dataset.labeled.iter().map(PairSample::key).collect();
    let mut labeled = dataset.labeled.clone();
    for s in &dataset.labeled {
        let mirror = PairKey::new(s.right_id, s.left_id);
        if !present.contains(&mirror) {
            labeled.push(s.swapped());
        }
    }
    PairDataset {
        labeled,
        unlabeled: dataset.unlabeled.clone(),
    }
}

/// Training rows `(features, label)` for `labeled`, each followed by its mirror.
pub fn training_rows(labeled: &[PairSample]) -> Vec<(Vec<f64>, bool)> {
    let mut rows = Vec::with_capacity(2 * labeled.len());
    for s in labeled {
        let label = s.label.expect("labeled sample carries a label");
        rows.push((s.features.clone(), label));
        rows.push((swap_features(&s.features), !label));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{sample_uniform, Direction, Objective, ParamValue, ParameterDef};

    fn space1() -> ConfigSpace {
        ConfigSpace::new(
            vec![ParameterDef::continuous("x", 0.0, 1.0).unwrap()],
            Objective {
                name: "y".into(),
                direction: Direction::HigherIsBetter,
            },
        )
        .unwrap()
    }

    fn configs(n: usize) -> Vec<Configuration> {
        sample_uniform(&space1(), n, 4).unwrap()
    }

    fn measured(cs: &[Configuration], l: usize) -> HashMap<u64, f64> {
        cs.iter().take(l).map(|c| (c.id, (c.id as f64 * 7.3) % 5.0)).collect()
    }

    #[test]
    fn label_of_cases() {
        assert!(label_of(160.0, 150.0).unwrap());
        assert!(!label_of(150.0, 150.0).unwrap());
        assert!(label_of(-3.0, -5.0).unwrap());
        assert!(label_of(f64::NAN, 1.0).is_err());
        assert!(label_of(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn pair_counts() {
        let cs = configs(5);
        let d = build_pairs(&space1(), &cs, &measured(&cs, 3)).unwrap();
        assert_eq!((d.labeled.len(), d.unlabeled.len()), (3, 7));

        let cs = configs(2);
        let d = build_pairs(&space1(), &cs, &HashMap::new()).unwrap();
        assert_eq!((d.labeled.len(), d.unlabeled.len()), (0, 1));

        let cs = configs(50);
        let d = build_pairs(&space1(), &cs, &measured(&cs, 50)).unwrap();
        let mut enumerated = 0;
        for a in 0..50 {
            for b in 0..50 {
                if a < b {
                    enumerated += 1;
                }
            }
        }
        assert_eq!(d.labeled.len(), enumerated);
        assert_eq!(d.labeled.len(), 1225);
    }

    #[test]
    fn build_pairs_labels_match_brute_force() {
        let cs = configs(12);
        let m = measured(&cs, 9);
        let d = build_pairs(&space1(), &cs, &m).unwrap();
        for s in &d.labeled {
            assert_eq!(s.label, Some(m[&s.left_id] > m[&s.right_id]));
            assert!(s.left_id < s.right_id);
            assert_eq!(s.source, LabelSource::Measured);
        }
        assert!(d.unlabeled.iter().all(|s| s.label.is_none() && s.source == LabelSource::None));
    }

    #[test]
    fn build_pairs_rejects_duplicates() {
        let mut cs = configs(3);
        cs[2].id = cs[0].id;
        assert!(matches!(
            build_pairs(&space1(), &cs, &HashMap::new()),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn encode_pair_concatenates() {
        let s = space1();
        let a = Configuration::new(0, vec![ParamValue::Number(0.2)]);
        let b = Configuration::new(1, vec![ParamValue::Number(0.7)]);
        assert_eq!(encode_pair(&s, &a, &b).unwrap(), vec![0.2, 0.7]);
        assert_eq!(encode_pair(&s, &b, &a).unwrap(), vec![0.7, 0.2]);
        let same = encode_pair(&s, &a, &a).unwrap();
        assert_eq!(same[..1], same[1..]);
    }

    #[test]
    fn swap_augmentation() {
        let cs = configs(5);
        let d = build_pairs(&space1(), &cs, &measured(&cs, 3)).unwrap();
        let once = augment_swaps(&d);
        assert_eq!((once.labeled.len(), once.unlabeled.len()), (6, 7));
        assert_eq!(augment_swaps(&once), once);
        for (s, m) in d.labeled.iter().zip(&once.labeled[3..]) {
            assert_eq!(m.label, s.label.map(|l| !l));
            assert_eq!(m.features, swap_features(&s.features));
            assert_eq!(m.source, s.source);
        }

        let one = PairDataset {
            labeled: vec![d.labeled[0].clone()],
            unlabeled: vec![],
        };
        let two = augment_swaps(&one);
        assert_eq!(two.labeled.len(), 2);
        assert_ne!(two.labeled[0].label, two.labeled[1].label);
    }

    #[test]
    fn transfer_conserves_pairs() {
        let cs = configs(6);
        let mut d = build_pairs(&space1(), &cs, &measured(&cs, 2)).unwrap();
        let total = d.total();
        let keys: Vec<(PairKey, bool)> = d.unlabeled.iter().take(3).map(|s| (s.key(), true)).collect();
        d.transfer(&keys, LabelSource::Expert).unwrap();
        assert_eq!(d.total(), total);
        assert_eq!(d.labeled.len(), 4);
        assert!(d.transfer(&keys, LabelSource::Expert).is_err());
        assert_eq!(d.total(), total);
    }

    #[test]
    fn csv_dump_round_trip() {
        let cs = configs(6);
        let mut d = build_pairs(&space1(), &cs, &measured(&cs, 3)).unwrap();
        let k = d.unlabeled[0].key();
        d.transfer(&[(k, false)], LabelSource::Pseudo).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = PairDataset::read_csv(buf.as_slice(), &space1(), &cs).unwrap();
        assert_eq!(back, d);
    }

    proptest::proptest! {
        #[test]
        fn label_of_is_strict_order(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            if label_of(a, b).unwrap() {
                proptest::prop_assert!(!label_of(b, a).unwrap());
            }
            proptest::prop_assert_eq!(label_of(a, b).unwrap(), a > b);
        }
    }
}
