//! Dataset model, file ingestion, synthetic data generation, split handling,
//! and episodic task sampling.
//!
//! On-disk formats:
//! - features: binary, magic `BGSF`, u32 LE version=1, u32 n, u32 K, then
//!   n*K f32 row-major, then n u32 labels;
//! - attributes: CSV with header `class_id,a_0,...,a_{d-1}`;
//! - splits: JSON with `seen`, `unseen`, `train_idx`, `test_seen_idx`,
//!   `test_unseen_idx`.
//!
//! Features are stored as f32 and promoted to f64 in memory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor2};

pub const FEATURES_MAGIC: &[u8; 4] = b"BGSF";
pub const FEATURES_VERSION: u32 = 1;

/// Per-class semantic attribute vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub d: usize,
    rows: BTreeMap<u32, Vec<f64>>,
}

impl AttributeTable {
    pub fn new(d: usize, rows: BTreeMap<u32, Vec<f64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Validation("attribute dimension must be >= 1".into()));
        }
        if let Some((c, r)) = rows.iter().find(|(_, r)| r.len() != d) {
            return Err(Error::Validation(format!(
                "attribute row for class {} has length {}, expected {}",
                c,
                r.len(),
                d
            )));
        }
        Ok(AttributeTable { d, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, class: u32) -> Result<&[f64]> {
        self.rows
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Validation(format!("no attribute row for class {class}")))
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }
}

/// Seen/unseen class split plus instance index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: BTreeSet<u32>,
    pub unseen: BTreeSet<u32>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
}

/// Instances as fixed-length feature vectors with labels and a split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub k: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub split: SplitSpec,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} instances",
                self.labels.len(),
                self.features.len()
            )));
        }
        if self.features.iter().any(|f| f.len() != self.k) {
            return Err(Error::Validation("feature length != K".into()));
        }
        let s = &self.split;
        if !s.seen.is_disjoint(&s.unseen) {
            return Err(Error::Validation("seen and unseen class sets overlap".into()));
        }
        for &label in &self.labels {
            if !s.seen.contains(&label) && !s.unseen.contains(&label) {
                return Err(Error::Validation(format!(
                    "label {label} appears in neither split"
                )));
            }
        }
        let check_idx = |idxs: &[usize], name: &str| -> Result<()> {
            for &i in idxs {
                if i >= self.len() {
                    return Err(Error::Validation(format!(
                        "{name} index {i} out of range ({} instances)",
                        self.len()
                    )));
                }
            }
            Ok(())
        };
        check_idx(&s.train_idx, "train")?;
        check_idx(&s.test_seen_idx, "test_seen")?;
        check_idx(&s.test_unseen_idx, "test_unseen")?;
        if s.train_idx.iter().any(|&i| !s.seen.contains(&self.labels[i])) {
            return Err(Error::Validation("train index with non-seen label".into()));
        }
        if s
            .test_unseen_idx
            .iter()
            .any(|&i| !s.unseen.contains(&self.labels[i]))
        {
            return Err(Error::Validation("test_unseen index with non-unseen label".into()));
        }
        Ok(())
    }

    /// Seen classes in ascending order; the cross-entropy normalization set.
    pub fn seen_classes(&self) -> Vec<u32> {
        self.split.seen.iter().copied().collect()
    }

    pub fn unseen_classes(&self) -> Vec<u32> {
        self.split.unseen.iter().copied().collect()
    }

    /// Train indices grouped per seen class, ascending class order.
    pub fn train_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &self.split.train_idx {
            map.entry(self.labels[i]).or_default().push(i);
        }
        map
    }
}

/// way/shot/query episode shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(Error::Config(format!(
                "episode config way={} shot={} query={} out of range",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One sampled few-shot task: disjoint train/validation class sets.
#[derive(Debug, Clone)]
pub struct Episode {
    /// (instance index, label) pairs, way*shot of them.
    pub d_tr: Vec<(usize, u32)>,
    /// (instance index, label) pairs, way*query of them.
    pub d_val: Vec<(usize, u32)>,
    pub tr_classes: BTreeSet<u32>,
    pub val_classes: BTreeSet<u32>,
}

/// Draws 2*way distinct seen classes; the first way supply shot training
/// instances each, the rest supply query validation instances each.
pub fn sample_episode(ds: &FeatureDataset, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<Episode> {
    cfg.validate()?;
    let by_class = ds.train_by_class();
    let need = cfg.shot.max(cfg.query);
    let mut eligible: Vec<u32> = by_class
        .iter()
        .filter(|(_, idxs)| idxs.len() >= need)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < 2 * cfg.way {
        return Err(Error::Sampling(format!(
            "{} eligible classes, need {}",
            eligible.len(),
            2 * cfg.way
        )));
    }
    eligible.shuffle(rng);
    let tr_classes: BTreeSet<u32> = eligible[..cfg.way].iter().copied().collect();
    let val_classes: BTreeSet<u32> = eligible[cfg.way..2 * cfg.way].iter().copied().collect();

    let draw = |classes: &BTreeSet<u32>, count: usize, rng: &mut Rng| -> Vec<(usize, u32)> {
        let mut out = Vec::with_capacity(classes.len() * count);
        for &c in classes {
            let mut idxs = by_class[&c].clone();
            idxs.shuffle(rng);
            out.extend(idxs[..count].iter().map(|&i| (i, c)));
        }
        out
    };
    let d_tr = draw(&tr_classes, cfg.shot, rng);
    let d_val = draw(&val_classes, cfg.query, rng);
    Ok(Episode {
        d_tr,
        d_val,
        tr_classes,
        val_classes,
    })
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub per_class: usize,
    pub k: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Synthetic dataset: class attributes uniform in [0,1]^d, a fixed random
/// projection defines class means in feature space, instances add Gaussian
/// noise. Unseen class means stay predictable from attributes, so zero-shot
/// transfer is possible by construction.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(FeatureDataset, AttributeTable)> {
    if cfg.num_seen == 0 || cfg.num_unseen == 0 || cfg.per_class == 0 || cfg.k == 0 || cfg.d == 0 {
        return Err(Error::Config("synth counts must be >= 1".into()));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(Error::Config("noise_sigma must be >= 0".into()));
    }
    let mut rng = crate::numkit::rng_from_seed(cfg.seed);
    let num_classes = cfg.num_seen + cfg.num_unseen;

    let mut attr_rows = BTreeMap::new();
    for c in 0..num_classes as u32 {
        let row: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(0.0..1.0)).collect();
        attr_rows.insert(c, row);
    }
    let attrs = AttributeTable::new(cfg.d, attr_rows)?;

    // Fixed random projection P (K x d); class mean = P * phi(c).
    let mut proj = Tensor2::zeros(cfg.k, cfg.d);
    for v in proj.data.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }

    let mut features = Vec::with_capacity(num_classes * cfg.per_class);
    let mut labels = Vec::with_capacity(num_classes * cfg.per_class);
    for c in 0..num_classes as u32 {
        let phi = attrs.row(c)?;
        let mean: Vec<f64> = (0..cfg.k)
            .map(|r| crate::numkit::dot(proj.row(r), phi))
            .collect();
        for _ in 0..cfg.per_class {
            let feat: Vec<f64> = mean
                .iter()
                .map(|&m| m + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(feat);
            labels.push(c);
        }
    }

    let seen: BTreeSet<u32> = (0..cfg.num_seen as u32).collect();
    let unseen: BTreeSet<u32> = (cfg.num_seen as u32..num_classes as u32).collect();
    let test_per_class = cfg.per_class / 5; // held-out 20%
    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    for c in 0..num_classes {
        let start = c * cfg.per_class;
        if (c as u32) < cfg.num_seen as u32 {
            train_idx.extend(start..start + cfg.per_class - test_per_class);
            test_seen_idx.extend(start + cfg.per_class - test_per_class..start + cfg.per_class);
        } else {
            test_unseen_idx.extend(start..start + cfg.per_class);
        }
    }

    let ds = FeatureDataset {
        k: cfg.k,
        features,
        labels,
        split: SplitSpec {
            seen,
            unseen,
            train_idx,
            test_seen_idx,
            test_unseen_idx,
        },
    };
    ds.validate()?;
    Ok((ds, attrs))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated features file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated features file".into()))?;
    Ok(f32::from_le_bytes(buf))
}

pub fn save_features(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.k as u32).to_le_bytes())?;
    for feat in &ds.features {
        for &v in feat {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &label in &ds.labels {
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn load_features(path: &Path) -> Result<(usize, Vec<Vec<f64>>, Vec<u32>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated features file".into()))?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::Format("bad magic in features file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURES_VERSION {
        return Err(Error::Format(format!("unsupported features version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            row.push(read_f32(&mut r)? as f64);
        }
        features.push(row);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut r)?);
    }
    Ok((k, features, labels))
}

pub fn save_attributes(path: &Path, attrs: &AttributeTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class_id".to_string()];
    header.extend((0..attrs.d).map(|j| format!("a_{j}")));
    w.write_record(&header)?;
    for c in attrs.classes() {
        let mut rec = vec![c.to_string()];
        rec.extend(attrs.row(c)?.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn load_attributes(path: &Path) -> Result<AttributeTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "class_id" {
        return Err(Error::Format("attributes CSV must start with class_id".into()));
    }
    let d = header.len() - 1;
    let mut rows = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::Format("attributes CSV row width mismatch".into()));
        }
        let class: u32 = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad class id `{}`", &rec[0])))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad attribute value `{s}`")))
            })
            .collect::<Result<_>>()?;
        if rows.insert(class, vals).is_some() {
            return Err(Error::Format(format!("duplicate attribute row for class {class}")));
        }
    }
    AttributeTable::new(d, rows)
}

pub fn save_splits(path: &Path, split: &SplitSpec) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), split)?;
    Ok(())
}

fn load_splits(path: &Path) -> Result<SplitSpec> {
    let file = std::fs::File::open(path)?;
    let split: SplitSpec = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Format(format!("splits JSON: {e}")))?;
    Ok(split)
}

/// Writes the three dataset files into `dir` as `features.bgsf`,
/// `attributes.csv`, and `splits.json`.
pub fn save_dataset(dir: &Path, ds: &FeatureDataset, attrs: &AttributeTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_features(&dir.join("features.bgsf"), ds)?;
    save_attributes(&dir.join("attributes.csv"), attrs)?;
    save_splits(&dir.join("splits.json"), &ds.split)?;
    Ok(())
}

pub fn load_dataset(
    features_path: &Path,
    attributes_path: &Path,
    splits_path: &Path,
) -> Result<(FeatureDataset, AttributeTable)> {
    let (k, features, labels) = load_features(features_path)?;
    let attrs = load_attributes(attributes_path)?;
    let split = load_splits(splits_path)?;
    let ds = FeatureDataset {
        k,
        features,
        labels,
        split,
    };
    ds.validate()?;
    for &label in &ds.labels {
        attrs.row(label)?;
    }
    Ok((ds, attrs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng_from_seed;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            num_seen: 6,
            num_unseen: 3,
            per_class: 10,
            k: 8,
            d: 4,
            noise_sigma: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let (a, ta) = synth_dataset(&small_synth()).unwrap();
        let (b, tb) = synth_dataset(&small_synth()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.len(), 90);
        assert_eq!(a.split.test_unseen_idx.len(), 30);
        assert_eq!(a.split.test_seen_idx.len(), 12);
        assert_eq!(a.split.train_idx.len(), 48);
    }

    #[test]
    fn synth_unseen_count_example() {
        let cfg = SynthConfig {
            num_seen: 4,
            num_unseen: 5,
            per_class: 50,
            k: 8,
            d: 4,
            noise_sigma: 0.1,
            seed: 1,
        };
        let (ds, _) = synth_dataset(&cfg).unwrap();
        assert_eq!(ds.split.test_unseen_idx.len(), 250);
    }

    #[test]
    fn synth_zero_noise_collapses_classes() {
        let mut cfg = small_synth();
        cfg.noise_sigma = 0.0;
        let (ds, _) = synth_dataset(&cfg).unwrap();
        for c in 0..ds.len() / cfg.per_class {
            let first = &ds.features[c * cfg.per_class];
            for i in 1..cfg.per_class {
                assert_eq!(&ds.features[c * cfg.per_class + i], first);
            }
        }
    }

    #[test]
    fn round_trip_through_files() {
        let (ds, attrs) = synth_dataset(&small_synth()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, &attrs).unwrap();
        let (ds2, attrs2) = load_dataset(
            &dir.path().join("features.bgsf"),
            &dir.path().join("attributes.csv"),
            &dir.path().join("splits.json"),
        )
        .unwrap();
        assert_eq!(ds.labels, ds2.labels);
        assert_eq!(ds.split, ds2.split);
        assert_eq!(attrs, attrs2);
        // Features pass through f32 storage; loading twice must be bit-stable.
        for (a, b) in ds.features.iter().zip(&ds2.features) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn truncated_features_is_format_error() {
        let (ds, attrs) = synth_dataset(&small_synth()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, &attrs).unwrap();
        let fpath = dir.path().join("features.bgsf");
        let bytes = std::fs::read(&fpath).unwrap();
        std::fs::write(&fpath, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(
            &fpath,
            &dir.path().join("attributes.csv"),
            &dir.path().join("splits.json"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.bgsf");
        std::fs::write(&fpath, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_features(&fpath).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let (mut ds, _) = synth_dataset(&small_synth()).unwrap();
        ds.split.unseen.insert(0); // class 0 is seen
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn episode_shapes_and_disjointness() {
        let cfg = SynthConfig {
            num_seen: 25,
            num_unseen: 5,
            per_class: 12,
            k: 8,
            d: 4,
            noise_sigma: 0.1,
            seed: 3,
        };
        let (ds, _) = synth_dataset(&cfg).unwrap();
        let mut rng = rng_from_seed(42);
        let ep = sample_episode(
            &ds,
            &EpisodeConfig {
                way: 10,
                shot: 5,
                query: 3,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(ep.d_tr.len(), 50);
        assert_eq!(ep.d_val.len(), 30);
        assert_eq!(ep.tr_classes.len(), 10);
        assert_eq!(ep.val_classes.len(), 10);
        assert!(ep.tr_classes.is_disjoint(&ep.val_classes));
    }

    #[test]
    fn episode_boundary_uses_all_classes() {
        let cfg = SynthConfig {
            num_seen: 4,
            num_unseen: 1,
            per_class: 10,
            k: 4,
            d: 3,
            noise_sigma: 0.0,
            seed: 5,
        };
        let (ds, _) = synth_dataset(&cfg).unwrap();
        let mut rng = rng_from_seed(0);
        let ep = sample_episode(
            &ds,
            &EpisodeConfig {
                way: 2,
                shot: 2,
                query: 2,
            },
            &mut rng,
        )
        .unwrap();
        let mut used: BTreeSet<u32> = ep.tr_classes.clone();
        used.extend(&ep.val_classes);
        assert_eq!(used.len(), 4);
    }

    #[test]
    fn episode_deterministic_and_insufficient_classes() {
        let (ds, _) = synth_dataset(&small_synth()).unwrap();
        let cfg = EpisodeConfig {
            way: 3,
            shot: 2,
            query: 2,
        };
        let a = sample_episode(&ds, &cfg, &mut rng_from_seed(9)).unwrap();
        let b = sample_episode(&ds, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.d_tr, b.d_tr);
        assert_eq!(a.d_val, b.d_val);

        let too_many = EpisodeConfig {
            way: 4,
            shot: 2,
            query: 2,
        };
        assert!(matches!(
            sample_episode(&ds, &too_many, &mut rng_from_seed(9)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn episode_property_sweep() {
        let (ds, _) = synth_dataset(&SynthConfig {
            num_seen: 12,
            num_unseen: 2,
            per_class: 9,
            k: 4,
            d: 3,
            noise_sigma: 0.2,
            seed: 8,
        })
        .unwrap();
        let mut rng = rng_from_seed(123);
        for trial in 0..200 {
            let cfg = EpisodeConfig {
                way: 2 + trial % 5,
                shot: 1 + trial % 4,
                query: 1 + trial % 3,
            };
            let ep = sample_episode(&ds, &cfg, &mut rng).unwrap();
            assert_eq!(ep.d_tr.len(), cfg.way * cfg.shot);
            assert_eq!(ep.d_val.len(), cfg.way * cfg.query);
            assert!(ep.tr_classes.is_disjoint(&ep.val_classes));
            for &(i, c) in ep.d_tr.iter().chain(&ep.d_val) {
                assert_eq!(ds.labels[i], c);
            }
        }
    }
}
