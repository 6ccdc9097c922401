//! Long-tailed dataset synthesis and label-manifest ingestion.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DATASET_MAGIC: &str = "lfme-dataset";
const DATASET_VERSION: u32 = 1;

/// Per-class sample counts: the substrate for all metrics and splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    counts: Vec<(u32, u64)>,
}

impl ClassDistribution {
    pub fn new(counts: Vec<(u32, u64)>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Validation("distribution has no classes".into()));
        }
        let mut seen = BTreeMap::new();
        for &(id, n) in &counts {
            if n == 0 {
                return Err(Error::Validation(format!("class {id} has zero samples")));
            }
            if seen.insert(id, n).is_some() {
                return Err(Error::Validation(format!("duplicate class id {id}")));
            }
        }
        Ok(Self { counts })
    }

    /// Build from raw counts, assigning class ids 0..C-1 in order.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        Self::new(
            counts
                .iter()
                .enumerate()
                .map(|(i, &n)| (i as u32, n))
                .collect(),
        )
    }

    pub fn counts(&self) -> &[(u32, u64)] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, n)| n).sum()
    }

    pub fn count_of(&self, class_id: u32) -> Option<u64> {
        self.counts
            .iter()
            .find(|&&(id, _)| id == class_id)
            .map(|&(_, n)| n)
    }

    /// Restrict to the given class ids (preserving input order of `ids`).
    pub fn restrict(&self, ids: &[u32]) -> Result<Self> {
        let counts = ids
            .iter()
            .map(|&id| {
                self.count_of(id)
                    .map(|n| (id, n))
                    .ok_or_else(|| Error::Validation(format!("class {id} not in distribution")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub partition: Partition,
    pub label: u32,
    pub features: Vec<f64>,
}

/// Immutable labeled dataset with train/val/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(feature_dim: usize, instances: Vec<Instance>) -> Result<Self> {
        for inst in &instances {
            if inst.features.len() != feature_dim {
                return Err(Error::Validation(format!(
                    "instance {} has dimension {} (expected {feature_dim})",
                    inst.id,
                    inst.features.len()
                )));
            }
        }
        Ok(Self {
            feature_dim,
            instances,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, id: u64) -> Option<&Instance> {
        // ids are assigned sequentially by the generator, so try direct index first
        if let Some(inst) = self.instances.get(id as usize) {
            if inst.id == id {
                return Some(inst);
            }
        }
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.partition == p)
    }

    /// Per-class counts of the train partition.
    pub fn train_distribution(&self) -> Result<ClassDistribution> {
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for inst in self.partition(Partition::Train) {
            *counts.entry(inst.label).or_insert(0) += 1;
        }
        ClassDistribution::new(counts.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Profile {
    /// Counts proportional to (i+1)^(-1/power), rescaled to [n_min, n_max].
    Pareto { power: f64 },
    /// Geometric interpolation from n_max down to n_min; the imbalance ratio
    /// is n_max / n_min.
    Exponential,
}

/// Recipe for a synthetic long-tailed blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub max_cardinality: u64,
    pub min_cardinality: u64,
    pub profile: Profile,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub seed: u64,
    /// Balanced val/test partitions: this many instances per class each.
    pub eval_per_class: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::InvalidSpec("feature_dim must be >= 1".into()));
        }
        if self.min_cardinality < 1 {
            return Err(Error::InvalidSpec("min_cardinality must be >= 1".into()));
        }
        if self.min_cardinality > self.max_cardinality {
            return Err(Error::InvalidSpec(format!(
                "min_cardinality {} exceeds max_cardinality {}",
                self.min_cardinality, self.max_cardinality
            )));
        }
        if let Profile::Pareto { power } = self.profile {
            if power <= 0.0 {
                return Err(Error::InvalidSpec("pareto power must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-class train cardinalities under the requested profile, non-increasing
/// in class index, clipped to [n_min, n_max].
pub fn profile_counts(spec: &GeneratorSpec) -> Result<Vec<u64>> {
    spec.validate()?;
    let c = spec.num_classes;
    let (n_max, n_min) = (spec.max_cardinality as f64, spec.min_cardinality as f64);
    let raw: Vec<f64> = match spec.profile {
        Profile::Exponential => {
            let ratio = n_min / n_max;
            (0..c)
                .map(|i| n_max * ratio.powf(i as f64 / (c - 1) as f64))
                .collect()
        }
        Profile::Pareto { power } => {
            let vals: Vec<f64> = (0..c).map(|i| ((i + 1) as f64).powf(-1.0 / power)).collect();
            let (hi, lo) = (vals[0], vals[c - 1]);
            let span = hi - lo;
            vals.iter()
                .map(|&v| {
                    if span > 0.0 {
                        n_min + (v - lo) / span * (n_max - n_min)
                    } else {
                        n_max
                    }
                })
                .collect()
        }
    };
    Ok(raw
        .into_iter()
        .map(|v| (v.round() as u64).clamp(spec.min_cardinality.max(1), spec.max_cardinality))
        .collect())
}

/// Synthesize a dataset of Gaussian blobs with the spec's cardinality profile.
///
/// Train counts follow the profile; val and test are class-balanced with
/// `eval_per_class` instances each. Everything is determined by the seed.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, ClassDistribution)> {
    let counts = profile_counts(spec)?;
    let dist = ClassDistribution::from_counts(&counts)?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One mean per class: random unit direction scaled to class_separation.
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter()
                .map(|x| x / norm * spec.class_separation)
                .collect()
        })
        .collect();

    let mut instances = Vec::new();
    let mut next_id = 0u64;
    let push = |partition: Partition,
                    label: u32,
                    rng: &mut ChaCha8Rng,
                    instances: &mut Vec<Instance>,
                    next_id: &mut u64| {
        let mean = &means[label as usize];
        let features = (0..d).map(|j| mean[j] + standard_normal(rng)).collect();
        instances.push(Instance {
            id: *next_id,
            partition,
            label,
            features,
        });
        *next_id += 1;
    };

    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            push(Partition::Train, class as u32, &mut rng, &mut instances, &mut next_id);
        }
    }
    for partition in [Partition::Val, Partition::Test] {
        for class in 0..spec.num_classes {
            for _ in 0..spec.eval_per_class {
                push(partition, class as u32, &mut rng, &mut instances, &mut next_id);
            }
        }
    }

    Ok((Dataset::new(d, instances)?, dist))
}

// Box-Muller; two uniforms per call keeps the stream position independent of
// how callers interleave draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parse a `class_id,count` manifest. A literal `class_id,count` header line
/// is skipped if present.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ClassDistribution> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn parse_manifest(reader: impl BufRead) -> Result<ClassDistribution> {
    let mut counts = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (line_no == 1 && trimmed == "class_id,count") {
            continue;
        }
        let (id_str, count_str) = trimmed.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `class_id,count`, got `{trimmed}`"),
        })?;
        let id: u32 = id_str.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid class id `{id_str}`"),
        })?;
        let count: i64 = count_str.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid count `{count_str}`"),
        })?;
        if count <= 0 {
            return Err(Error::Validation(format!(
                "line {line_no}: count for class {id} must be positive, got {count}"
            )));
        }
        counts.push((id, count as u64));
    }
    ClassDistribution::new(counts)
}

pub fn save_manifest(dist: &ClassDistribution, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("class_id,count\n");
    for &(id, n) in dist.counts() {
        out.push_str(&format!("{id},{n}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write a dataset: a versioned header line, then one CSV record per
/// instance (`instance_id,partition,label,f_0,...,f_{d-1}`).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    write(&format!(
        "{DATASET_MAGIC} v{DATASET_VERSION} dim={}\n",
        dataset.feature_dim()
    ))?;
    for inst in dataset.instances() {
        let mut line = format!("{},{},{}", inst.id, inst.partition, inst.label);
        for f in &inst.features {
            line.push(',');
            line.push_str(&format!("{f:?}"));
        }
        line.push('\n');
        write(&line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(Error::Format(format!("not a dataset file: `{header}`")));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{DATASET_VERSION}") {
        return Err(Error::Format(format!(
            "unsupported dataset version `{version}` (expected v{DATASET_VERSION})"
        )));
    }
    let dim: usize = parts
        .next()
        .and_then(|s| s.strip_prefix("dim="))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("missing dim= in dataset header".into()))?;

    let mut instances = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let id: u64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad instance id".into()))?;
        let partition = fields
            .next()
            .and_then(Partition::parse)
            .ok_or_else(|| err("bad partition tag".into()))?;
        let label: u32 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad label".into()))?;
        let features: Vec<f64> = fields
            .map(|s| s.parse().map_err(|_| err(format!("bad feature `{s}`"))))
            .collect::<Result<_>>()?;
        if features.len() != dim {
            return Err(Error::Validation(format!(
                "line {line_no}: {} features, header says {dim}",
                features.len()
            )));
        }
        instances.push(Instance {
            id,
            partition,
            label,
            features,
        });
    }
    Dataset::new(dim, instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, n_max: u64, n_min: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_classes: c,
            max_cardinality: n_max,
            min_cardinality: n_min,
            profile: Profile::Exponential,
            feature_dim: 4,
            class_separation: 3.0,
            seed: 42,
            eval_per_class: 5,
        }
    }

    #[test]
    fn exponential_endpoints() {
        assert_eq!(profile_counts(&spec(2, 100, 1)).unwrap(), vec![100, 1]);
    }

    #[test]
    fn exponential_geometric_interpolation() {
        // n_max * r^(i/(C-1)) with r = 1/100
        assert_eq!(profile_counts(&spec(3, 100, 1)).unwrap(), vec![100, 10, 1]);
    }

    #[test]
    fn pareto_counts_monotone_and_bounded() {
        let mut s = spec(20, 500, 5);
        s.profile = Profile::Pareto { power: 6.0 };
        let counts = profile_counts(&s).unwrap();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[19], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn generate_is_deterministic() {
        let s = spec(3, 50, 5);
        let (a, da) = generate(&s).unwrap();
        let (b, db) = generate(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
    }

    #[test]
    fn generate_matches_profile_and_balanced_eval() {
        let s = spec(3, 50, 5);
        let (ds, dist) = generate(&s).unwrap();
        assert_eq!(ds.train_distribution().unwrap(), dist);
        for class in 0..3u32 {
            let n_val = ds
                .partition(Partition::Val)
                .filter(|i| i.label == class)
                .count();
            assert_eq!(n_val, 5);
        }
    }

    #[test]
    fn generate_rejects_bad_specs() {
        assert!(generate(&spec(1, 10, 1)).is_err());
        let mut s = spec(3, 10, 1);
        s.feature_dim = 0;
        assert!(generate(&s).is_err());
        let mut s = spec(3, 10, 1);
        s.min_cardinality = 20;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dist = parse_manifest("0,5\n1,1280\n".as_bytes()).unwrap();
        assert_eq!(dist.counts(), &[(0, 5), (1, 1280)]);

        match parse_manifest("a,b\n".as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error at line 1, got {other:?}"),
        }
        assert!(matches!(
            parse_manifest("0,5\n0,7\n".as_bytes()),
            Err(Error::Validation(_))
        ));
        assert!(parse_manifest("0,-3\n".as_bytes()).is_err());
        // header line is skipped
        let dist = parse_manifest("class_id,count\n0,5\n".as_bytes()).unwrap();
        assert_eq!(dist.counts(), &[(0, 5)]);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let (ds, _) = generate(&spec(3, 30, 3)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_dataset(&empty), Err(Error::Format(_))));

        let bad_dim = dir.path().join("bad.csv");
        std::fs::write(&bad_dim, "lfme-dataset v1 dim=2\n0,train,0,1.0\n").unwrap();
        assert!(matches!(load_dataset(&bad_dim), Err(Error::Validation(_))));

        let bad_version = dir.path().join("ver.csv");
        std::fs::write(&bad_version, "lfme-dataset v9 dim=2\n").unwrap();
        assert!(matches!(load_dataset(&bad_version), Err(Error::Format(_))));
    }
}
