//! Feature datasets with class attributes and seen/unseen splits, plus a
//! synthetic Gaussian-cluster benchmark with a known answer.
//!
//! # Directory format
//!
//! A dataset is a directory with three files:
//!
//! - `meta.json`: `name`, `feature_dim`, `attr_dim`, `classes`,
//!   `seen_classes`, `unseen_classes`, `seen_test_rows`, `unseen_test_rows`
//!   (row ids are 0-based positions in `features.csv`).
//! - `features.csv`: header `row_id,label,f0,...,f{D-1}`, one example per line.
//! - `attributes.csv`: header `class_id,a0,...,a{d_a-1}`, one class per line,
//!   in the order of `classes`.
//!
//! Reals are written in scientific notation with 9 significant digits
//! (`{:.8e}`). Class ids must not contain commas, colons, or whitespace.
//!
//! Seen-class rows outside `seen_test_rows` are the training rows. Every
//! unseen-class row must appear in `unseen_test_rows`.
//!
//! # Exporting the standard benchmarks
//!
//! The usual benchmark release ships `res101.mat` (`features` as `D x N`,
//! 1-based `labels`) and `att_splits.mat` (`att` as `d_a x C`,
//! `trainval_loc`, `test_seen_loc`, `test_unseen_loc`, all 1-based). To
//! convert: write every column of `features` as a `features.csv` row labelled
//! with its class name; write each column of `att` to `attributes.csv`; put
//! the classes of `trainval_loc` rows in `seen_classes` and those of
//! `test_unseen_loc` in `unseen_classes`; copy `test_seen_loc - 1` and
//! `test_unseen_loc - 1` into the two test-row lists. Rows not referenced by
//! any of the three location lists should be dropped before writing.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{streams, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Formats a real with 9 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds a real to what [`format_real`] writes.
pub fn quantize(v: f64) -> f64 {
    format_real(v).parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    name: String,
    feature_dim: usize,
    attr_dim: usize,
    classes: Vec<ClassId>,
    seen_classes: Vec<ClassId>,
    unseen_classes: Vec<ClassId>,
    seen_test_rows: Vec<usize>,
    unseen_test_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    pub classes: Vec<ClassId>,
    /// One row per entry of `classes`.
    pub attributes: Matrix,
    pub seen_classes: Vec<ClassId>,
    pub unseen_classes: Vec<ClassId>,
    pub seen_test_rows: Vec<usize>,
    pub unseen_test_rows: Vec<usize>,
    index: HashMap<ClassId, usize>,
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.feature_dim == other.feature_dim
            && self.attr_dim == other.attr_dim
            && self.features == other.features
            && self.labels == other.labels
            && self.classes == other.classes
            && self.attributes == other.attributes
            && self.seen_classes == other.seen_classes
            && self.unseen_classes == other.unseen_classes
            && self.seen_test_rows == other.seen_test_rows
            && self.unseen_test_rows == other.unseen_test_rows
    }
}

impl DatasetBundle {
    /// Assembles and validates a bundle.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<ClassId>,
        classes: Vec<ClassId>,
        attributes: Matrix,
        seen_classes: Vec<ClassId>,
        unseen_classes: Vec<ClassId>,
        seen_test_rows: Vec<usize>,
        unseen_test_rows: Vec<usize>,
    ) -> Result<Self> {
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let bundle = Self {
            name: name.into(),
            feature_dim: features.cols(),
            attr_dim: attributes.cols(),
            features,
            labels,
            classes,
            attributes,
            seen_classes,
            unseen_classes,
            seen_test_rows,
            unseen_test_rows,
            index,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.index.len() != self.classes.len() {
            return Err(Error::Data("duplicate class ids in class list".into()));
        }
        for c in &self.classes {
            if c.0.is_empty() || c.0.contains([',', ':']) || c.0.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid class id `{c}`")));
            }
        }
        if self.attributes.rows() != self.classes.len() {
            return Err(Error::DimensionMismatch {
                what: "attribute rows".into(),
                expected: self.classes.len(),
                found: self.attributes.rows(),
            });
        }
        if self.features.rows() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                what: "feature rows vs labels".into(),
                expected: self.labels.len(),
                found: self.features.rows(),
            });
        }
        if !self.features.is_finite() || !self.attributes.is_finite() {
            return Err(Error::Data("non-finite feature or attribute value".into()));
        }
        for l in &self.labels {
            if !self.index.contains_key(l) {
                return Err(Error::UnknownClass {
                    class: l.0.clone(),
                    context: "feature labels".into(),
                });
            }
        }
        for (list, what) in [(&self.seen_classes, "seen classes"), (&self.unseen_classes, "unseen classes")] {
            for c in list {
                if !self.index.contains_key(c) {
                    return Err(Error::UnknownClass {
                        class: c.0.clone(),
                        context: what.into(),
                    });
                }
            }
        }
        let seen: BTreeSet<&ClassId> = self.seen_classes.iter().collect();
        let overlap: Vec<String> = self
            .unseen_classes
            .iter()
            .filter(|c| seen.contains(c))
            .map(|c| c.0.clone())
            .collect();
        if !overlap.is_empty() {
            return Err(Error::ClassOverlap(overlap));
        }
        let unseen: BTreeSet<&ClassId> = self.unseen_classes.iter().collect();
        for (rows, set, what) in [
            (&self.seen_test_rows, &seen, "seen test rows"),
            (&self.unseen_test_rows, &unseen, "unseen test rows"),
        ] {
            for &r in rows {
                let label = self.labels.get(r).ok_or_else(|| {
                    Error::Data(format!("{what}: row {r} out of range ({} rows)", self.labels.len()))
                })?;
                if !set.contains(label) {
                    return Err(Error::Data(format!(
                        "{what}: row {r} has label `{label}` outside that split"
                    )));
                }
            }
        }
        let unseen_test: BTreeSet<usize> = self.unseen_test_rows.iter().copied().collect();
        for (r, l) in self.labels.iter().enumerate() {
            if unseen.contains(l) && !unseen_test.contains(&r) {
                return Err(Error::Data(format!(
                    "row {r} of unseen class `{l}` is not a test row; unseen classes may not have training rows"
                )));
            }
        }
        Ok(())
    }

    pub fn class_position(&self, class: &ClassId) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn attribute(&self, class: &ClassId) -> Option<&[f64]> {
        self.class_position(class).map(|i| self.attributes.row(i))
    }

    /// Attribute rows for a list of labels.
    pub fn attribute_rows(&self, labels: &[ClassId]) -> Result<Matrix> {
        let idx = labels
            .iter()
            .map(|l| {
                self.class_position(l).ok_or_else(|| Error::UnknownClass {
                    class: l.0.clone(),
                    context: "attribute lookup".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.attributes.select_rows(&idx))
    }

    /// Seen-class rows not reserved for testing, grouped by class in
    /// `seen_classes` order.
    pub fn seen_train_rows(&self) -> Vec<(ClassId, Vec<usize>)> {
        let test: BTreeSet<usize> = self.seen_test_rows.iter().copied().collect();
        let mut by_class: HashMap<&ClassId, Vec<usize>> = HashMap::new();
        for (r, l) in self.labels.iter().enumerate() {
            if !test.contains(&r) {
                by_class.entry(l).or_default().push(r);
            }
        }
        self.seen_classes
            .iter()
            .map(|c| (c.clone(), by_class.remove(c).unwrap_or_default()))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            attr_dim: self.attr_dim,
            classes: self.classes.clone(),
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            seen_test_rows: self.seen_test_rows.clone(),
            unseen_test_rows: self.unseen_test_rows.clone(),
        };
        let mut json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Data(format!("meta encoding: {e}")))?;
        json.push('\n');
        write_file(&dir.join("meta.json"), &json)?;

        write_features_csv(dir.join("features.csv"), &self.labels, &self.features)?;

        let mut out = String::from("class_id");
        for j in 0..self.attr_dim {
            out.push_str(&format!(",a{j}"));
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            out.push_str(c.as_str());
            for v in self.attributes.row(i) {
                out.push(',');
                out.push_str(&format_real(*v));
            }
            out.push('\n');
        }
        write_file(&dir.join("attributes.csv"), &out)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_str(&read_file(&meta_path)?).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;

        let features_path = dir.join("features.csv");
        let (labels, features) = read_features_csv(&features_path, meta.feature_dim)?;

        let attr_path = dir.join("attributes.csv");
        let (attr_classes, attr_rows) = parse_labeled_csv(&read_file(&attr_path)?, &attr_path, 1, meta.attr_dim)?;
        let mut by_class: HashMap<ClassId, Vec<f64>> = HashMap::new();
        for (c, row) in attr_classes.into_iter().zip(attr_rows) {
            if !meta.classes.contains(&c) {
                return Err(Error::UnknownClass {
                    class: c.0,
                    context: "attributes.csv".into(),
                });
            }
            by_class.insert(c, row);
        }
        let mut ordered = Vec::with_capacity(meta.classes.len());
        for c in &meta.classes {
            ordered.push(by_class.remove(c).ok_or_else(|| {
                Error::Data(format!("class `{c}` has no attribute row in attributes.csv"))
            })?);
        }
        let attributes = if ordered.is_empty() {
            Matrix::zeros(0, meta.attr_dim)
        } else {
            Matrix::from_rows(&ordered)?
        };

        let mut bundle = Self::new(
            meta.name,
            features,
            labels,
            meta.classes,
            attributes,
            meta.seen_classes,
            meta.unseen_classes,
            meta.seen_test_rows,
            meta.unseen_test_rows,
        )?;
        bundle.feature_dim = meta.feature_dim;
        bundle.attr_dim = meta.attr_dim;
        Ok(bundle)
    }
}

/// Writes rows in the `features.csv` schema: `row_id,label,f0..f{D-1}`.
pub fn write_features_csv(path: impl AsRef<Path>, labels: &[ClassId], features: &Matrix) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let mut out = String::from("row_id,label");
    for j in 0..features.cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (r, label) in labels.iter().enumerate() {
        out.push_str(&format!("{r},{label}"));
        for v in features.row(r) {
            out.push(',');
            out.push_str(&format_real(*v));
        }
        out.push('\n');
    }
    write_file(path.as_ref(), &out)
}

/// Reads a `features.csv` file whose rows have `width` values.
pub fn read_features_csv(path: impl AsRef<Path>, width: usize) -> Result<(Vec<ClassId>, Matrix)> {
    let path = path.as_ref();
    let (labels, rows) = parse_labeled_csv(&read_file(path)?, path, 2, width)?;
    let features = if rows.is_empty() {
        Matrix::zeros(0, width)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok((labels, features))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses `key[,row_id-or-label],v0,...` lines; `label_col` is the 1-based
/// column holding the class id (2 for features, 1 for attributes).
fn parse_labeled_csv(
    text: &str,
    path: &Path,
    label_col: usize,
    width: usize,
) -> Result<(Vec<ClassId>, Vec<Vec<f64>>)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header_values = header.split(',').count() - label_col;
    if header_values != width {
        return Err(Error::DimensionMismatch {
            what: format!("{} header columns", path.display()),
            expected: width,
            found: header_values,
        });
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + label_col {
            return Err(Error::DimensionMismatch {
                what: format!("{} line {lineno}", path.display()),
                expected: width + label_col,
                found: fields.len(),
            });
        }
        if label_col == 2 {
            let id: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(lineno, format!("row id: {e}")))?;
            if id != rows.len() {
                return Err(parse_err(lineno, format!("row id {id} out of sequence")));
            }
        }
        labels.push(ClassId::new(fields[label_col - 1]));
        let row = fields[label_col..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(lineno, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((labels, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBenchSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub cluster_std: f64,
    pub examples_per_class: usize,
    /// Fraction of each seen class held out as seen test rows.
    pub seen_test_fraction: f64,
    /// Class means live on a random subspace of this rank.
    pub latent_rank: usize,
    /// Per-coordinate standard deviation of the class means.
    pub mean_spread: f64,
    /// Minimum pairwise distance between class means.
    pub min_separation: f64,
    /// Standard deviation of the noise added to projected attributes.
    pub attr_noise: f64,
    /// Not serialized; callers set it from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticBenchSpec {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 4,
            feature_dim: 64,
            attr_dim: 16,
            cluster_std: 0.5,
            examples_per_class: 60,
            seen_test_fraction: 0.2,
            latent_rank: 4,
            mean_spread: 0.5,
            min_separation: 3.0,
            attr_noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticBenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen == 0 || self.n_unseen == 0 {
            return Err(Error::Config("synthetic benchmark needs seen and unseen classes".into()));
        }
        if self.feature_dim == 0 || self.attr_dim == 0 || self.latent_rank == 0 {
            return Err(Error::Config("synthetic benchmark dimensions must be positive".into()));
        }
        if [self.cluster_std, self.attr_noise, self.mean_spread].iter().any(|v| v.is_nan())
            || self.cluster_std < 0.0
            || self.attr_noise < 0.0
            || self.mean_spread <= 0.0
        {
            return Err(Error::Config("synthetic benchmark scales must be non-negative".into()));
        }
        if self.examples_per_class < 2 {
            return Err(Error::Config("need at least two examples per class".into()));
        }
        if !(0.0..1.0).contains(&self.seen_test_fraction) {
            return Err(Error::Config("seen_test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// True class means, one row per class in bundle class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub classes: Vec<ClassId>,
    pub means: Matrix,
}

impl ClassMeans {
    pub fn mean_of(&self, class: &ClassId) -> Option<&[f64]> {
        self.classes.iter().position(|c| c == class).map(|i| self.means.row(i))
    }

    /// Nearest-mean label among `candidates` for one feature row.
    pub fn nearest(&self, x: &[f64], candidates: &[ClassId]) -> Option<ClassId> {
        candidates
            .iter()
            .filter_map(|c| {
                self.mean_of(c)
                    .map(|m| (c, m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c.clone())
    }

    /// Mean per-class accuracy of nearest-mean prediction on `rows`,
    /// restricted to `candidates`.
    pub fn nearest_mean_accuracy(&self, bundle: &DatasetBundle, rows: &[usize], candidates: &[ClassId]) -> f64 {
        let mut tally: HashMap<&ClassId, (usize, usize)> = HashMap::new();
        for &r in rows {
            let truth = &bundle.labels[r];
            let pred = self.nearest(bundle.features.row(r), candidates);
            let e = tally.entry(truth).or_default();
            e.1 += 1;
            if pred.as_ref() == Some(truth) {
                e.0 += 1;
            }
        }
        if tally.is_empty() {
            return 0.0;
        }
        tally.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / tally.len() as f64
    }
}

/// Generates the synthetic benchmark.
///
/// Class `c` has mean `m_c = B u_c` for a random `D x k` basis `B` and
/// `u_c ~ N(0, I_k)`, rejection-sampled until all means are at least
/// `min_separation` apart. Examples are `m_c + cluster_std * N(0, I)`.
/// Attributes are `P m_c + attr_noise * N(0, I)` for a random `d_a x D`
/// projection `P`, so attributes determine the means up to noise. All
/// values are quantized to the on-disk precision.
pub fn make_synthetic(spec: &SyntheticBenchSpec) -> Result<(DatasetBundle, ClassMeans)> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, streams::DATA);
    let (d, k, da) = (spec.feature_dim, spec.latent_rank, spec.attr_dim);
    let n_classes = spec.n_seen + spec.n_unseen;

    let basis_scale = spec.mean_spread / (k as f64).sqrt();
    let basis: Vec<f64> = (0..d * k).map(|_| basis_scale * rng.normal()).collect();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while means.len() < n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "could not place {n_classes} class means {} apart",
                spec.min_separation
            )));
        }
        let u: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let m: Vec<f64> = (0..d)
            .map(|i| (0..k).map(|j| basis[i * k + j] * u[j]).sum())
            .collect();
        let far = means.iter().all(|o| {
            o.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= spec.min_separation
        });
        if far {
            means.push(m);
        }
    }

    let proj_scale = 1.0 / (d as f64).sqrt();
    let proj: Vec<f64> = (0..da * d).map(|_| proj_scale * rng.normal()).collect();
    let attributes: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            (0..da)
                .map(|i| {
                    let p: f64 = (0..d).map(|j| proj[i * d + j] * m[j]).sum();
                    quantize(p + spec.attr_noise * rng.normal())
                })
                .collect()
        })
        .collect();

    let classes: Vec<ClassId> = (0..n_classes).map(|c| ClassId(format!("c{c}"))).collect();
    let seen_classes = classes[..spec.n_seen].to_vec();
    let unseen_classes = classes[spec.n_seen..].to_vec();
    let n_test_seen = ((spec.examples_per_class as f64) * spec.seen_test_fraction).round() as usize;

    let mut rows = Vec::with_capacity(n_classes * spec.examples_per_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    let mut seen_test_rows = Vec::new();
    let mut unseen_test_rows = Vec::new();
    for (c, m) in means.iter().enumerate() {
        for e in 0..spec.examples_per_class {
            let r = rows.len();
            rows.push(
                m.iter()
                    .map(|&mu| quantize(mu + spec.cluster_std * rng.normal()))
                    .collect::<Vec<_>>(),
            );
            labels.push(classes[c].clone());
            if c >= spec.n_seen {
                unseen_test_rows.push(r);
            } else if e >= spec.examples_per_class - n_test_seen {
                seen_test_rows.push(r);
            }
        }
    }

    let bundle = DatasetBundle::new(
        format!("synthetic-{}", spec.seed),
        Matrix::from_rows(&rows)?,
        labels,
        classes.clone(),
        Matrix::from_rows(&attributes)?,
        seen_classes,
        unseen_classes,
        seen_test_rows,
        unseen_test_rows,
    )?;
    let oracle = ClassMeans {
        classes,
        means: Matrix::from_rows(&means)?,
    };
    Ok((bundle, oracle))
}
