//! Bag and dataset model, the `GMILBAGS` binary bag file, and
//! patient-stratified splitting.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GMILBAGS" | version u32 = 1 | M u32 | bag_count u64
//! per bag:
//!   bag_id_len u16 | bag_id utf-8
//!   patient_id_len u16 | patient_id utf-8
//!   S u32 | bag_label u8 | has_instance_labels u8
//!   [S x u8 instance labels, only if has_instance_labels = 1]
//!   S*M x f32 features, row-major
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GMILBAGS";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the first bag record.
pub const HEADER_LEN: usize = 8 + 4 + 4 + 8;

/// One ordered bag of instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub patient_id: String,
    /// S x M, instances in spatial order.
    pub features: Array2<f32>,
    pub bag_label: bool,
    pub instance_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features widened to f64 for computation.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Copy of this bag with instance labels removed, as handed to training.
    pub fn without_instance_labels(&self) -> Bag {
        Bag {
            instance_labels: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Validation(format!("bag {} has no instances", self.bag_id)));
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != self.len() {
                return Err(Error::Validation(format!(
                    "bag {}: {} instance labels for {} instances",
                    self.bag_id,
                    labels.len(),
                    self.len()
                )));
            }
            let any_positive = labels.iter().any(|&l| l);
            if any_positive != self.bag_label {
                return Err(Error::Validation(format!(
                    "bag {}: bag label {} inconsistent with instance labels",
                    self.bag_id, self.bag_label as u8
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    /// Shared feature dimension M.
    pub dim: usize,
    pub split_assignment: Option<BTreeMap<String, Split>>,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, dim: usize) -> Result<Self> {
        let ds = Dataset {
            bags,
            dim,
            split_assignment: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for bag in &self.bags {
            if bag.dim() != self.dim {
                return Err(Error::Dimension(format!(
                    "bag {} has M = {}, dataset M = {}",
                    bag.bag_id,
                    bag.dim(),
                    self.dim
                )));
            }
            bag.validate()?;
        }
        if let Some(assign) = &self.split_assignment {
            let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
            for bag in &self.bags {
                if let Some(&split) = assign.get(&bag.bag_id) {
                    if let Some(prev) = patient_split.insert(&bag.patient_id, split) {
                        if prev != split {
                            return Err(Error::Validation(format!(
                                "patient {} appears in both {} and {}",
                                bag.patient_id,
                                prev.name(),
                                split.name()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Bags assigned to `split`, in dataset order.
    pub fn subset(&self, split: Split) -> Dataset {
        let bags = match &self.split_assignment {
            Some(assign) => self
                .bags
                .iter()
                .filter(|b| assign.get(&b.bag_id) == Some(&split))
                .cloned()
                .collect(),
            None => Vec::new(),
        };
        Dataset {
            bags,
            dim: self.dim,
            split_assignment: None,
        }
    }

    pub fn without_instance_labels(&self) -> Dataset {
        Dataset {
            bags: self.bags.iter().map(Bag::without_instance_labels).collect(),
            dim: self.dim,
            split_assignment: self.split_assignment.clone(),
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.bags.is_empty() {
            return 0.0;
        }
        self.bags.iter().filter(|b| b.bag_label).count() as f64 / self.bags.len() as f64
    }
}

/// Size in bytes of one bag record.
pub fn record_len(bag: &Bag) -> usize {
    let s = bag.len();
    let labels = if bag.instance_labels.is_some() { s } else { 0 };
    2 + bag.bag_id.len() + 2 + bag.patient_id.len() + 4 + 1 + 1 + labels + 4 * s * bag.dim()
}

pub fn write_bags<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    dataset.validate()?;
    let dim = u32::try_from(dataset.dim)
        .map_err(|_| Error::Validation("feature dimension exceeds u32".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(dataset.bags.len() as u64).to_le_bytes())?;
    for bag in &dataset.bags {
        write_str(&mut w, &bag.bag_id)?;
        write_str(&mut w, &bag.patient_id)?;
        let s = u32::try_from(bag.len())
            .map_err(|_| Error::Validation("bag size exceeds u32".into()))?;
        w.write_all(&s.to_le_bytes())?;
        w.write_all(&[bag.bag_label as u8])?;
        match &bag.instance_labels {
            Some(labels) => {
                w.write_all(&[1])?;
                let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
                w.write_all(&bytes)?;
            }
            None => w.write_all(&[0])?,
        }
        let mut buf = Vec::with_capacity(4 * bag.features.len());
        for &x in bag.features.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Validation(format!("identifier longer than 65535 bytes: {s:.32}...")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn save_bags(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_bags(dataset, BufWriter::new(file))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated(what.to_string())
            } else {
                Error::Io(e)
            }
        })
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.exact(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| Error::Validation(format!("{what} is not valid utf-8")))
    }
}

pub fn read_bags<R: Read>(r: R) -> Result<Dataset> {
    let mut r = Reader { inner: r };
    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32("feature dimension")? as usize;
    let count = r.u64("bag count")?;
    let mut bags = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let ctx = |field: &str| format!("bag {i}: {field}");
        let bag_id = r.string(&ctx("bag_id"))?;
        let patient_id = r.string(&ctx("patient_id"))?;
        let s = r.u32(&ctx("S"))? as usize;
        let bag_label = match r.u8(&ctx("bag_label"))? {
            0 => false,
            1 => true,
            v => return Err(Error::Validation(format!("bag {bag_id}: bag_label byte {v}"))),
        };
        let instance_labels = match r.u8(&ctx("has_instance_labels"))? {
            0 => None,
            1 => {
                let mut raw = vec![0u8; s];
                r.exact(&mut raw, &ctx("instance labels"))?;
                let mut labels = Vec::with_capacity(s);
                for v in raw {
                    match v {
                        0 => labels.push(false),
                        1 => labels.push(true),
                        v => {
                            return Err(Error::Validation(format!(
                                "bag {bag_id}: instance label byte {v}"
                            )))
                        }
                    }
                }
                Some(labels)
            }
            v => {
                return Err(Error::Validation(format!(
                    "bag {bag_id}: has_instance_labels byte {v}"
                )))
            }
        };
        let mut raw = vec![0u8; 4 * s * dim];
        r.exact(&mut raw, &ctx("features"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let features = Array2::from_shape_vec((s, dim), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        bags.push(Bag {
            bag_id,
            patient_id,
            features,
            bag_label,
            instance_labels,
        });
    }
    Dataset::new(bags, dim)
}

pub fn load_bags(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    read_bags(BufReader::new(file))
}

/// Ratio weights for (train, val, test).
pub const DEFAULT_RATIOS: (u32, u32, u32) = (4, 1, 1);

/// Assigns whole patients to train/val/test at the given ratio, stratified
/// by patient class (a patient is positive if any of their bags is).
///
/// Patients of each class are shuffled with the seeded generator and given a
/// fractional rank `(i + 0.5) / n_class`; merging the classes by that rank
/// interleaves them evenly, and the merged list is cut at the quota
/// boundaries. Val and test each receive at least one patient.
pub fn split_by_patient(dataset: &Dataset, ratios: (u32, u32, u32), seed: u64) -> Result<Dataset> {
    let (rt, rv, rs) = ratios;
    let total_ratio = (rt + rv + rs) as f64;
    if total_ratio == 0.0 || rv == 0 || rs == 0 {
        return Err(Error::Config("split ratios must give val and test a share".into()));
    }
    let mut patient_label: BTreeMap<&str, bool> = BTreeMap::new();
    for bag in &dataset.bags {
        *patient_label.entry(&bag.patient_id).or_insert(false) |= bag.bag_label;
    }
    let n = patient_label.len();
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 patients to split, got {n}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranked: Vec<(f64, u8, &str)> = Vec::with_capacity(n);
    for (class, positive) in [(0u8, true), (1u8, false)] {
        let mut members: Vec<&str> = patient_label
            .iter()
            .filter(|(_, &l)| l == positive)
            .map(|(&p, _)| p)
            .collect();
        members.shuffle(&mut rng);
        let nc = members.len() as f64;
        for (i, p) in members.into_iter().enumerate() {
            ranked.push(((i as f64 + 0.5) / nc, class, p));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n_val = ((n as f64 * rv as f64 / total_ratio).round() as usize).max(1);
    let n_test = ((n as f64 * rs as f64 / total_ratio).round() as usize).max(1);
    let n_train = n - n_val - n_test;

    let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
    for (pos, (_, _, p)) in ranked.iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        patient_split.insert(p, split);
    }

    let assignment = dataset
        .bags
        .iter()
        .map(|b| (b.bag_id.clone(), patient_split[b.patient_id.as_str()]))
        .collect();
    let out = Dataset {
        bags: dataset.bags.clone(),
        dim: dataset.dim,
        split_assignment: Some(assignment),
    };
    out.validate()?;
    Ok(out)
}

/// Patients per split, for reporting.
pub fn patients_by_split(dataset: &Dataset) -> BTreeMap<Split, BTreeSet<String>> {
    let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    if let Some(assign) = &dataset.split_assignment {
        for bag in &dataset.bags {
            if let Some(&s) = assign.get(&bag.bag_id) {
                out.entry(s).or_default().insert(bag.patient_id.clone());
            }
        }
    }
    out
}
