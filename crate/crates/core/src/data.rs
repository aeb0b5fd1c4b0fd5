//! Synthetic open-set identity data and the `CRDS` dataset file format.
//!
//! Identities are prototypes on a unit sphere in a latent space; samples are
//! noisy normalized copies of their prototype, pushed through a fixed random
//! projection and `mixing_depth` fixed random `tanh` layers. Identities are
//! split so that evaluation identities never appear in training.
//!
//! `CRDS` layout, all little-endian: magic `b"CRDS"`, version `u32`,
//! input dim `u32`, sample count `u32`, identity count `u32`, labels
//! `u32[count]`, inputs `f32[count * dim]` row-major.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const DATASET_MAGIC: [u8; 4] = *b"CRDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitySpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// 1 spreads prototypes uniformly over the sphere; smaller values pull
    /// them toward a shared direction.
    pub prototype_spread: f64,
    /// Expected norm of the latent perturbation (per-coordinate std-dev is
    /// `within_noise / sqrt(latent_dim)`).
    pub within_noise: f64,
    /// Identity-independent latent factors appended before mixing.
    pub nuisance_dim: usize,
    /// Expected norm of the nuisance factors, as a multiple of `within_noise`.
    pub nuisance_ratio: f64,
    pub mixing_depth: usize,
    pub mixing_gain: f64,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for IdentitySpec {
    fn default() -> Self {
        IdentitySpec {
            num_identities: 50,
            samples_per_identity: 40,
            input_dim: 32,
            latent_dim: 16,
            prototype_spread: 1.0,
            within_noise: 0.25,
            nuisance_dim: 8,
            nuisance_ratio: 4.0,
            mixing_depth: 2,
            mixing_gain: 2.0,
            eval_fraction: 0.2,
            seed: 0,
        }
    }
}

impl IdentitySpec {
    pub fn eval_identities(&self) -> usize {
        (self.num_identities as f64 * self.eval_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_identities < 2 {
            return bad("num_identities must be at least 2");
        }
        if self.samples_per_identity < 2 {
            return bad("samples_per_identity must be at least 2");
        }
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.prototype_spread > 0.0 && self.prototype_spread <= 1.0) {
            return bad("prototype_spread must lie in (0, 1]");
        }
        if !(self.within_noise >= 0.0 && self.within_noise.is_finite()) {
            return bad("within_noise must be finite and non-negative");
        }
        if !(self.nuisance_ratio >= 0.0 && self.nuisance_ratio.is_finite()) {
            return bad("nuisance_ratio must be finite and non-negative");
        }
        if !(self.mixing_gain > 0.0 && self.mixing_gain.is_finite()) {
            return bad("mixing_gain must be positive");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        if self.num_identities - self.eval_identities() < 2 {
            return bad("training split needs at least 2 identities");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Unspecified,
}

impl Split {
    fn from_path(path: &Path) -> Split {
        match path.file_stem().and_then(|s| s.to_str()) {
            Some("train") => Split::Train,
            Some("eval") => Split::Eval,
            _ => Split::Unspecified,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Samples x input dim; every value is exactly representable as `f32`.
    pub inputs: Mat,
    /// Global identity id of each sample.
    pub labels: Vec<u32>,
    pub split: Split,
    /// Sorted distinct identity ids.
    pub identities: Vec<u32>,
}

impl Dataset {
    pub fn new(inputs: Mat, labels: Vec<u32>, split: Split) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        let identities: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let ds = Dataset {
            inputs,
            labels,
            split,
            identities,
        };
        ds.check_counts()?;
        Ok(ds)
    }

    fn check_counts(&self) -> Result<()> {
        for (id, count) in self.samples_per_identity() {
            if count < 2 {
                return Err(Error::validation(
                    "labels",
                    format!("identity {id} has {count} sample(s), need at least 2"),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn samples_per_identity(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    /// Dense class index (position in the identity registry) per sample.
    pub fn class_indices(&self) -> Vec<usize> {
        let pos: BTreeMap<u32, usize> = self.identities.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        self.labels.iter().map(|l| pos[l]).collect()
    }

    /// Sample indices grouped by class index.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identities.len()];
        for (i, c) in self.class_indices().into_iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.len() * (4 + 4 * self.input_dim()));
        buf.extend_from_slice(&DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            dim_u32(self.input_dim())?,
            dim_u32(self.len())?,
            dim_u32(self.num_identities())?,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for &v in self.inputs.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let mut ds = Self::from_bytes(&bytes)?;
        ds.split = Split::from_path(path);
        Ok(ds)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.magic()?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let identity_count = r.u32()? as usize;
        let expected_len = count
            .checked_mul(4 + 4 * dim)
            .and_then(|n| n.checked_add(20))
            .ok_or_else(|| Error::Corrupt("header sizes overflow".into()))?;
        if bytes.len() < expected_len {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("dataset truncated: {} of {expected_len} bytes", bytes.len()),
            )
            .into());
        }
        if bytes.len() > expected_len {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - expected_len)));
        }
        let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            data.push(r.f32()? as f64);
        }
        let inputs = Mat::from_vec(count, dim, data).map_err(|_| Error::Corrupt("non-finite input value".into()))?;
        let ds = Dataset::new(inputs, labels, Split::Unspecified)?;
        if ds.num_identities() != identity_count {
            return Err(Error::validation(
                "labels",
                format!(
                    "{} distinct identities found, header registers {identity_count}",
                    ds.num_identities()
                ),
            ));
        }
        Ok(ds)
    }

    /// Import `label,feat0,feat1,...` rows; a non-numeric first line is
    /// treated as a header.
    pub fn from_csv(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let first = fields.next().unwrap_or_default();
            let Ok(label) = first.parse::<u32>() else {
                if lineno == 0 {
                    continue;
                }
                return Err(Error::Parse {
                    line: lineno + 1,
                    column: 1,
                    message: format!("bad label {first:?}"),
                });
            };
            let mut row = 0;
            for (col, f) in fields.enumerate() {
                let v: f32 = f.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    column: col + 2,
                    message: format!("bad feature {f:?}"),
                })?;
                data.push(v as f64);
                row += 1;
            }
            if *dim.get_or_insert(row) != row {
                return Err(Error::Parse {
                    line: lineno + 1,
                    column: 1,
                    message: "ragged row".into(),
                });
            }
            labels.push(label);
        }
        let inputs = Mat::from_vec(labels.len(), dim.unwrap_or(0), data)?;
        Dataset::new(inputs, labels, split)
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidSpec(format!("{v} does not fit in u32")))
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "unexpected end of file").into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// First four bytes; short files read as a bad magic.
    pub(crate) fn magic(&mut self) -> Result<[u8; 4]> {
        let mut m = [0u8; 4];
        let n = self.remaining().min(4);
        m[..n].copy_from_slice(&self.bytes[..n]);
        self.pos = n;
        Ok(m)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-6 {
            return v.into_iter().map(|x| x / nrm).collect();
        }
    }
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let in_dim = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * in_dim..(o + 1) * in_dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Generate the train and eval splits.
pub fn generate(spec: &IdentitySpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d) = (spec.latent_dim, spec.input_dim);
    let kn = spec.nuisance_dim;
    let noise_sd = spec.within_noise / (k as f64).sqrt();
    let nuisance_sd = if kn == 0 { 0.0 } else { spec.nuisance_ratio * spec.within_noise / (kn as f64).sqrt() };

    let center = unit_vec(&mut rng, k);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_identities)
        .map(|_| {
            let u = unit_vec(&mut rng, k);
            let mixed: Vec<f64> = u
                .iter()
                .zip(&center)
                .map(|(ui, ci)| spec.prototype_spread * ui + (1.0 - spec.prototype_spread) * ci)
                .collect();
            let nrm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            mixed.into_iter().map(|x| x / nrm).collect()
        })
        .collect();

    // fixed random projection into input space, then nonlinear mixing
    let proj: Vec<f64> = gaussian_vec(&mut rng, d * (k + kn))
        .into_iter()
        .map(|v| v / ((k + kn) as f64).sqrt())
        .collect();
    let zero_bias = vec![0.0; d];
    let layers: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.mixing_depth)
        .map(|_| {
            let w = gaussian_vec(&mut rng, d * d)
                .into_iter()
                .map(|v| v * spec.mixing_gain / (d as f64).sqrt())
                .collect();
            let b = gaussian_vec(&mut rng, d).into_iter().map(|v| 0.1 * v).collect();
            (w, b)
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (id, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_identity {
            let noisy: Vec<f64> = proto
                .iter()
                .map(|p| p + noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let nrm = noisy.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mut latent: Vec<f64> = noisy.into_iter().map(|x| x / nrm).collect();
            latent.extend((0..kn).map(|_| nuisance_sd * rng.sample::<f64, _>(StandardNormal)));
            let mut x = affine(&proj, &zero_bias, &latent);
            for (w, b) in &layers {
                x = affine(w, b, &x).into_iter().map(f64::tanh).collect();
            }
            rows.push(x.into_iter().map(|v| v as f32 as f64).collect::<Vec<f64>>());
            labels.push(id as u32);
        }
    }

    let n_eval = spec.eval_identities();
    let n_train = spec.num_identities - n_eval;
    let split_at = n_train * spec.samples_per_identity;
    let train = Dataset::new(Mat::from_rows(&rows[..split_at])?, labels[..split_at].to_vec(), Split::Train)?;
    let eval = if n_eval == 0 {
        Dataset::new(Mat::zeros(0, d), Vec::new(), Split::Eval)?
    } else {
        Dataset::new(Mat::from_rows(&rows[split_at..])?, labels[split_at..].to_vec(), Split::Eval)?
    };
    Ok((train, eval))
}

pub fn check_disjoint(train: &Dataset, eval: &Dataset) -> Result<()> {
    let train_ids: BTreeSet<u32> = train.identities.iter().copied().collect();
    if let Some(id) = eval.identities.iter().find(|id| train_ids.contains(id)) {
        return Err(Error::validation(
            "identities",
            format!("identity {id} appears in both train and eval splits"),
        ));
    }
    Ok(())
}

/// Load `train.crds` and `eval.crds` from `dir`, asserting disjoint identities.
pub fn load_splits(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = Dataset::load(dir.join("train.crds"))?;
    let eval = Dataset::load(dir.join("eval.crds"))?;
    check_disjoint(&train, &eval)?;
    Ok((train, eval))
}

/// Load a dataset file; when its sibling split exists, the two are checked
/// for disjoint identities.
pub fn load_checked(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let ds = Dataset::load(path)?;
    let sibling = match ds.split {
        Split::Train => Some("eval.crds"),
        Split::Eval => Some("train.crds"),
        Split::Unspecified => None,
    };
    if let Some(name) = sibling {
        let other = path.with_file_name(name);
        if other.exists() {
            let other = Dataset::load(other)?;
            check_disjoint(&ds, &other)?;
        }
    }
    Ok(ds)
}

/// Nearest-centroid training accuracy on raw inputs (cosine).
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let classes = ds.class_indices();
    let k = ds.num_identities();
    let dim = ds.input_dim();
    let mut centroids = vec![vec![0.0; dim]; k];
    for (r, &c) in classes.iter().enumerate() {
        for (a, v) in centroids[c].iter_mut().zip(ds.inputs.row(r)) {
            *a += v;
        }
    }
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb).max(1e-300)
    };
    let correct = classes
        .iter()
        .enumerate()
        .filter(|&(r, &c)| {
            let best = (0..k)
                .map(|j| (j, cos(ds.inputs.row(r), &centroids[j])))
                .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
            best.0 == c
        })
        .count();
    correct as f64 / ds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> IdentitySpec {
        IdentitySpec {
            num_identities: 10,
            samples_per_identity: 6,
            input_dim: 8,
            latent_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let (train, eval) = generate(&small_spec()).unwrap();
        assert_eq!(train.num_identities(), 8);
        assert_eq!(eval.num_identities(), 2);
        check_disjoint(&train, &eval).unwrap();
        let (train2, eval2) = generate(&small_spec()).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
    }

    #[test]
    fn zero_noise_collapses_identities() {
        let spec = IdentitySpec {
            within_noise: 0.0,
            ..small_spec()
        };
        let (train, _) = generate(&spec).unwrap();
        for g in train.indices_by_class() {
            for &i in &g[1..] {
                assert_eq!(train.inputs.row(i), train.inputs.row(g[0]));
            }
        }
    }

    #[test]
    fn unmixed_low_noise_is_centroid_separable() {
        let spec = IdentitySpec {
            mixing_depth: 0,
            within_noise: 0.05,
            ..Default::default()
        };
        let (train, _) = generate(&spec).unwrap();
        assert!(nearest_centroid_accuracy(&train) > 0.99);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            IdentitySpec { num_identities: 1, ..small_spec() },
            IdentitySpec { within_noise: -1.0, ..small_spec() },
            IdentitySpec { samples_per_identity: 1, ..small_spec() },
            IdentitySpec { prototype_spread: 0.0, ..small_spec() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn inputs_are_f32_exact() {
        let (train, _) = generate(&small_spec()).unwrap();
        assert!(train.inputs.as_slice().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        fs::write(&p, "label,f0,f1\n3,0.5,1\n3,0.25,-1\n9,1,2\n9,3,4\n").unwrap();
        let ds = Dataset::from_csv(&p, Split::Eval).unwrap();
        assert_eq!(ds.labels, vec![3, 3, 9, 9]);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.inputs.get(1, 1), -1.0);
        fs::write(&p, "3,0.5\n3,x\n").unwrap();
        assert!(matches!(Dataset::from_csv(&p, Split::Eval), Err(Error::Parse { line: 2, .. })));
    }
}
