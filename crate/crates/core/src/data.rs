//! Labeled samples, the on-disk dataset format, and a synthetic
//! hierarchical (coarse → fine) Gaussian generator.
//!
//! # File format
//!
//! A dataset file is UTF-8 text. The first line is a header of manifest
//! fields:
//!
//! ```text
//! # star-dataset v1 coarse=<M> fine=<K> dim=<d_in>
//! ```
//!
//! followed by a CSV table (RFC 4180 quoting) whose header row is
//! `id,coarse,fine,text,x0,...,x<d_in-1>`. `fine` and `text` may be empty.
//! Feature values are written with Rust's shortest round-trip float
//! formatting, so save → load is exact. A directory produced by
//! [`save_splits`] holds `train.csv`, `test.csv`, and `manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

pub const FORMAT_TAG: &str = "star-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub coarse: usize,
    /// Hidden fine label; only evaluation code reads it.
    pub fine: Option<usize>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub dim: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn coarse_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.coarse).collect()
    }

    /// Hidden fine labels, if every sample carries one.
    pub fn fine_labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.fine).collect()
    }

    /// Checks labels, dimensions, and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let fail = |message: String| Error::Data {
                path: PathBuf::from("<memory>"),
                line: i + 1,
                message,
            };
            if s.features.len() != self.dim {
                return Err(fail(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    self.dim
                )));
            }
            if s.coarse >= self.n_coarse {
                return Err(fail(format!("coarse label {} >= {}", s.coarse, self.n_coarse)));
            }
            if let Some(f) = s.fine {
                if f >= self.n_fine {
                    return Err(fail(format!("fine label {f} >= {}", self.n_fine)));
                }
            }
            if !seen.insert(s.id) {
                return Err(fail(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    External { description: String },
}

/// JSON sidecar describing a train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_train: usize,
    pub n_test: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub d_in: usize,
    pub seed: Option<u64>,
    /// `fine_to_coarse[f]` is the coarse parent of fine category `f`.
    pub fine_to_coarse: Option<Vec<usize>>,
    pub source: DataSource,
}

impl DatasetManifest {
    pub fn check_against(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        let mismatch = |field: &str, expected: usize, actual: usize| {
            Error::config(field, format!("manifest says {expected}, files hold {actual}"))
        };
        if self.n_train != train.len() {
            return Err(mismatch("n_train", self.n_train, train.len()));
        }
        if self.n_test != test.len() {
            return Err(mismatch("n_test", self.n_test, test.len()));
        }
        for ds in [train, test] {
            if ds.n_coarse != self.n_coarse {
                return Err(mismatch("n_coarse", self.n_coarse, ds.n_coarse));
            }
            if ds.n_fine != self.n_fine {
                return Err(mismatch("n_fine", self.n_fine, ds.n_fine));
            }
            if ds.dim != self.d_in {
                return Err(mismatch("d_in", self.d_in, ds.dim));
            }
        }
        if let Some(map) = &self.fine_to_coarse {
            if map.len() != self.n_fine || map.iter().any(|&c| c >= self.n_coarse) {
                return Err(Error::config("fine_to_coarse", "must map every fine label to a valid coarse label"));
            }
            let covered: HashSet<usize> = map.iter().copied().collect();
            if covered.len() != self.n_coarse {
                return Err(Error::config("fine_to_coarse", "must cover every coarse label"));
            }
            for s in train.samples.iter().chain(&test.samples) {
                if let Some(f) = s.fine {
                    if map[f] != s.coarse {
                        return Err(Error::config(
                            "fine_to_coarse",
                            format!("sample {} has fine {f} under coarse {}", s.id, s.coarse),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_per_fine: usize,
    pub d_latent: usize,
    pub d_in: usize,
    pub coarse_sep: f64,
    pub fine_sep: f64,
    pub noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The benchmark shipped with the repository: 3 coarse / 9 fine
    /// categories, 1800 train and 450 test samples.
    pub fn standard(seed: u64) -> Self {
        SyntheticSpec {
            n_coarse: 3,
            n_fine: 9,
            n_per_fine: 250,
            d_latent: 8,
            d_in: 32,
            coarse_sep: 4.0,
            fine_sep: 1.5,
            noise: 0.45,
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::config("coarse", "need at least one coarse category"));
        }
        if self.n_fine < self.n_coarse {
            return Err(Error::config(
                "fine",
                format!(
                    "K={} fine categories cannot cover M={} coarse categories (need K >= M)",
                    self.n_fine, self.n_coarse
                ),
            ));
        }
        if self.n_per_fine < 2 {
            return Err(Error::config("per_fine", "need at least 2 samples per fine category"));
        }
        if self.d_latent == 0 || self.d_in == 0 {
            return Err(Error::config("dims", "latent and input dimensions must be >= 1"));
        }
        if !(self.coarse_sep > 0.0) || !(self.fine_sep > 0.0) {
            return Err(Error::config("separation", "coarse_sep and fine_sep must be > 0"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be finite and >= 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Coarse parent of each fine category; coarse classes receive
    /// `⌈K/M⌉` or `⌊K/M⌋` children.
    pub fn fine_to_coarse(&self) -> Vec<usize> {
        (0..self.n_fine).map(|f| f % self.n_coarse).collect()
    }
}

/// Output of [`generate_synthetic`], including the latent geometry for
/// sanity checks.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: DatasetManifest,
    pub fine_centers: Vec<Vec<f64>>,
    pub train_latent: Vec<Vec<f64>>,
    pub test_latent: Vec<Vec<f64>>,
}

fn random_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::vecmath::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gaussian clusters around fine centers, which sit `fine_sep` away from
/// their coarse parent, which sit `coarse_sep` from the origin; latents are
/// then pushed through a fixed random linear map to `d_in`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut geometry = stream_rng(spec.seed, "generator-geometry");
    let mut sampling = stream_rng(spec.seed, "generator-samples");
    let mut split = stream_rng(spec.seed, "generator-split");

    let coarse_centers: Vec<Vec<f64>> = (0..spec.n_coarse)
        .map(|_| {
            random_direction(&mut geometry, spec.d_latent)
                .into_iter()
                .map(|x| x * spec.coarse_sep)
                .collect()
        })
        .collect();
    let parent = spec.fine_to_coarse();
    let fine_centers: Vec<Vec<f64>> = parent
        .iter()
        .map(|&c| {
            let dir = random_direction(&mut geometry, spec.d_latent);
            coarse_centers[c]
                .iter()
                .zip(dir)
                .map(|(x, u)| x + spec.fine_sep * u)
                .collect()
        })
        .collect();
    let scale = 1.0 / (spec.d_latent as f64).sqrt();
    let map: Vec<f64> = (0..spec.d_in * spec.d_latent)
        .map(|_| geometry.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    let project = |z: &[f64]| -> Vec<f64> {
        map.chunks_exact(spec.d_latent)
            .map(|row| crate::vecmath::dot(row, z))
            .collect()
    };

    let n_test_per_fine = ((spec.n_per_fine as f64) * spec.test_fraction).round() as usize;
    let n_test_per_fine = n_test_per_fine.clamp(1, spec.n_per_fine - 1);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 0u64;
    for (f, center) in fine_centers.iter().enumerate() {
        let mut members: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_per_fine)
            .map(|_| {
                let z: Vec<f64> = center
                    .iter()
                    .map(|c| c + spec.noise * sampling.sample::<f64, _>(StandardNormal))
                    .collect();
                let x = project(&z);
                (z, x)
            })
            .collect();
        members.shuffle(&mut split);
        for (i, (z, x)) in members.into_iter().enumerate() {
            let sample = LabeledSample {
                id: next_id,
                features: x,
                coarse: parent[f],
                fine: Some(f),
                text: None,
            };
            next_id += 1;
            if i < n_test_per_fine {
                test.push((sample, z));
            } else {
                train.push((sample, z));
            }
        }
    }
    train.shuffle(&mut split);
    test.shuffle(&mut split);

    let (train_samples, train_latent): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let (test_samples, test_latent): (Vec<_>, Vec<_>) = test.into_iter().unzip();
    let wrap = |samples| Dataset {
        n_coarse: spec.n_coarse,
        n_fine: spec.n_fine,
        dim: spec.d_in,
        samples,
    };
    let train = wrap(train_samples);
    let test = wrap(test_samples);
    let manifest = DatasetManifest {
        n_train: train.len(),
        n_test: test.len(),
        n_coarse: spec.n_coarse,
        n_fine: spec.n_fine,
        d_in: spec.d_in,
        seed: Some(spec.seed),
        fine_to_coarse: Some(parent),
        source: DataSource::Synthetic(spec.clone()),
    };
    Ok(SyntheticData {
        train,
        test,
        manifest,
        fine_centers,
        train_latent,
        test_latent,
    })
}

fn header_line(ds: &Dataset) -> String {
    format!(
        "# {FORMAT_TAG} v{FORMAT_VERSION} coarse={} fine={} dim={}",
        ds.n_coarse, ds.n_fine, ds.dim
    )
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let io_err = |e| Error::io(path, e);
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    writeln!(file, "{}", header_line(ds)).map_err(io_err)?;
    {
        let mut writer = csv::Writer::from_writer(&mut file);
        let mut header = vec!["id".to_string(), "coarse".into(), "fine".into(), "text".into()];
        header.extend((0..ds.dim).map(|i| format!("x{i}")));
        let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        writer.write_record(&header).map_err(to_io)?;
        for s in &ds.samples {
            let mut row = Vec::with_capacity(4 + ds.dim);
            row.push(s.id.to_string());
            row.push(s.coarse.to_string());
            row.push(s.fine.map(|f| f.to_string()).unwrap_or_default());
            row.push(s.text.clone().unwrap_or_default());
            row.extend(s.features.iter().map(|v| format!("{v:?}")));
            writer.write_record(&row).map_err(to_io)?;
        }
        writer.flush().map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

fn parse_header(line: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let fail = |message: String| Error::Data {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some(FORMAT_TAG) {
        return Err(fail(format!("expected header `# {FORMAT_TAG} v{FORMAT_VERSION} ...`")));
    }
    if parts.next() != Some(&format!("v{FORMAT_VERSION}")) {
        return Err(fail(format!("unsupported format version (want v{FORMAT_VERSION})")));
    }
    let (mut coarse, mut fine, mut dim) = (None, None, None);
    for kv in parts {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| fail(format!("malformed header field `{kv}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| fail(format!("header field `{key}` is not an integer")))?;
        match key {
            "coarse" => coarse = Some(value),
            "fine" => fine = Some(value),
            "dim" => dim = Some(value),
            other => return Err(fail(format!("unknown header field `{other}`"))),
        }
    }
    match (coarse, fine, dim) {
        (Some(c), Some(f), Some(d)) if c >= 1 && d >= 1 => Ok((c, f, d)),
        _ => Err(fail("header needs coarse>=1, fine, dim>=1".into())),
    }
}

/// Loads one dataset file. Errors carry the 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let (n_coarse, n_fine, dim) = parse_header(first.trim_end(), path)?;

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let columns = csv_reader
        .headers()
        .map_err(|e| data_err(2, e.to_string()))?
        .clone();
    if columns.len() != 4 + dim
        || &columns[0] != "id"
        || &columns[1] != "coarse"
        || &columns[2] != "fine"
        || &columns[3] != "text"
    {
        return Err(data_err(
            2,
            format!("expected columns id,coarse,fine,text plus {dim} features"),
        ));
    }

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (row_idx, record) in csv_reader.records().enumerate() {
        // header comment + column header precede the first record
        let line = row_idx + 3;
        let record = record.map_err(|e| data_err(line, e.to_string()))?;
        if record.len() != 4 + dim {
            return Err(data_err(
                line,
                format!("expected {} fields, found {}", 4 + dim, record.len()),
            ));
        }
        let id: u64 = record[0]
            .parse()
            .map_err(|_| data_err(line, format!("field `id`: `{}` is not an integer", &record[0])))?;
        let coarse: usize = record[1]
            .parse()
            .map_err(|_| data_err(line, format!("field `coarse`: `{}` is not an integer", &record[1])))?;
        if coarse >= n_coarse {
            return Err(data_err(
                line,
                format!("field `coarse`: label {coarse} out of range [0, {n_coarse})"),
            ));
        }
        let fine = if record[2].is_empty() {
            None
        } else {
            let f: usize = record[2]
                .parse()
                .map_err(|_| data_err(line, format!("field `fine`: `{}` is not an integer", &record[2])))?;
            if f >= n_fine {
                return Err(data_err(line, format!("field `fine`: label {f} out of range [0, {n_fine})")));
            }
            Some(f)
        };
        let text = (!record[3].is_empty()).then(|| record[3].to_string());
        let features = (0..dim)
            .map(|i| {
                let raw = &record[4 + i];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| data_err(line, format!("field `x{i}`: `{raw}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !seen.insert(id) {
            return Err(data_err(line, format!("duplicate sample id {id}")));
        }
        samples.push(LabeledSample {
            id,
            features,
            coarse,
            fine,
            text,
        });
    }
    Ok(Dataset {
        n_coarse,
        n_fine,
        dim,
        samples,
    })
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.csv`, `test.csv`, and `manifest.json` into `dir`.
pub fn save_splits(dir: &Path, train: &Dataset, test: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    manifest.check_against(train, test)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(train, &dir.join(TRAIN_FILE))?;
    save_dataset(test, &dir.join(TEST_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a split directory. The manifest is optional; when present its
/// counts must match the files.
pub fn load_splits(dir: &Path) -> Result<(Dataset, Dataset, Option<DatasetManifest>)> {
    let train = load_dataset(&dir.join(TRAIN_FILE))?;
    let test = load_dataset(&dir.join(TEST_FILE))?;
    if (train.n_coarse, train.n_fine, train.dim) != (test.n_coarse, test.n_fine, test.dim) {
        return Err(Error::config("dataset", "train and test headers disagree"));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.check_against(&train, &test)?;
        Some(manifest)
    } else {
        None
    };
    Ok((train, test, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::squared_distance;
    use std::collections::HashMap;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_per_fine: 200,
            ..SyntheticSpec::standard(seed)
        }
    }

    #[test]
    fn counts_and_hierarchy() {
        let data = generate_synthetic(&small_spec(1)).unwrap();
        assert_eq!(data.train.len() + data.test.len(), 1800);
        assert_eq!(data.test.len(), 9 * 40);
        let map = data.manifest.fine_to_coarse.clone().unwrap();
        for c in 0..3 {
            assert_eq!(map.iter().filter(|&&p| p == c).count(), 3);
        }
        for s in data.train.samples.iter().chain(&data.test.samples) {
            assert_eq!(map[s.fine.unwrap()], s.coarse);
        }
        data.manifest.check_against(&data.train, &data.test).unwrap();
    }

    #[test]
    fn standard_benchmark_sizes() {
        let data = generate_synthetic(&SyntheticSpec::standard(3)).unwrap();
        assert_eq!(data.train.len(), 1800);
        assert_eq!(data.test.len(), 450);
    }

    #[test]
    fn uneven_fine_allocation() {
        let spec = SyntheticSpec {
            n_coarse: 3,
            n_fine: 7,
            ..small_spec(2)
        };
        let mut counts = [0; 3];
        for c in spec.fine_to_coarse() {
            counts[c] += 1;
        }
        counts.sort();
        assert_eq!(counts, [2, 2, 3]);
    }

    #[test]
    fn stratified_split() {
        let data = generate_synthetic(&small_spec(4)).unwrap();
        let mut per_fine: HashMap<usize, (usize, usize)> = HashMap::new();
        for s in &data.train.samples {
            per_fine.entry(s.fine.unwrap()).or_default().0 += 1;
        }
        for s in &data.test.samples {
            per_fine.entry(s.fine.unwrap()).or_default().1 += 1;
        }
        for (_, (tr, te)) in per_fine {
            assert!((te as i64 - 40).abs() <= 1);
            assert!((tr as i64 - 160).abs() <= 1);
        }
    }

    #[test]
    fn zero_noise_collapses_fine_categories() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..small_spec(5)
        };
        let data = generate_synthetic(&spec).unwrap();
        let mut first: HashMap<usize, Vec<f64>> = HashMap::new();
        for s in data.train.samples.iter().chain(&data.test.samples) {
            let reference = first.entry(s.fine.unwrap()).or_insert_with(|| s.features.clone());
            assert_eq!(reference, &s.features);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small_spec(6)).unwrap();
        let b = generate_synthetic(&small_spec(6)).unwrap();
        let c = generate_synthetic(&small_spec(7)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn nearest_center_oracle() {
        let spec = SyntheticSpec {
            coarse_sep: 40.0,
            fine_sep: 8.0,
            noise: 0.2,
            ..small_spec(8)
        };
        let data = generate_synthetic(&spec).unwrap();
        for (s, z) in data.test.samples.iter().zip(&data.test_latent) {
            let nearest = data
                .fine_centers
                .iter()
                .enumerate()
                .min_by(|a, b| squared_distance(a.1, z).total_cmp(&squared_distance(b.1, z)))
                .unwrap()
                .0;
            assert_eq!(Some(nearest), s.fine);
        }
    }

    #[test]
    fn invalid_spec() {
        let spec = SyntheticSpec {
            n_coarse: 5,
            n_fine: 3,
            ..small_spec(1)
        };
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(err.to_string().contains("K >= M"), "{err}");
        assert!(generate_synthetic(&SyntheticSpec { fine_sep: 0.0, ..small_spec(1) }).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = generate_synthetic(&SyntheticSpec {
            n_per_fine: 10,
            ..small_spec(9)
        })
        .unwrap();
        data.train.samples[0].text = Some("turn on the \"lights\", please".into());
        data.train.samples[1].fine = None;
        save_splits(dir.path(), &data.train, &data.test, &data.manifest).unwrap();
        let (train, test, manifest) = load_splits(dir.path()).unwrap();
        assert_eq!(train, data.train);
        assert_eq!(test, data.test);
        assert_eq!(manifest.unwrap(), data.manifest);
    }

    fn write(path: &Path, body: &str) {
        fs::write(path, body).unwrap();
    }

    #[test]
    fn rejects_out_of_range_coarse_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write(
            &path,
            "# star-dataset v1 coarse=2 fine=4 dim=2\nid,coarse,fine,text,x0,x1\n0,1,,,0.5,1\n1,2,,,0.1,0.2\n",
        );
        match load_dataset(&path) {
            Err(Error::Data { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("coarse"), "{message}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write(&path, "# star-dataset v1 coarse=2 fine=4 dim=2\nid,coarse,fine,text,x0,x1\n0,1,,,0.5\n");
        assert!(matches!(load_dataset(&path), Err(Error::Data { line: 3, .. })));
        write(&path, "# star-dataset v1 coarse=2 fine=4 dim=2\nid,coarse,fine,text,x0,x1\n0,1,,,0.5,abc\n");
        assert!(matches!(load_dataset(&path), Err(Error::Data { line: 3, .. })));
        write(&path, "# star-dataset v1 coarse=2 fine=4 dim=2\nid,coarse,fine,text,x0,x1\n0,1,9,,0.5,1\n");
        assert!(matches!(load_dataset(&path), Err(Error::Data { line: 3, .. })));
        write(&path, "id,coarse\n");
        assert!(matches!(load_dataset(&path), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn external_embeddings_load() {
        // e.g. sentence embeddings exported by another tool, no fine labels
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut body = String::from("# star-dataset v1 coarse=2 fine=3 dim=4\nid,coarse,fine,text,x0,x1,x2,x3\n");
        body.push_str("17,0,,book a flight,0.01,-0.2,0.33,1e-3\n");
        body.push_str("18,1,,\"what's the weather, today\",0.5,0.25,-0.125,0\n");
        write(&path, &body);
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1].text.as_deref(), Some("what's the weather, today"));
        assert!(ds.fine_labels().is_none());
    }
}
