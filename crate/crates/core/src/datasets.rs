//! Instances, weakly labeled bags, and the generators that build them.
//!
//! A [`Dataset`] is a dense row-major feature matrix with optional true
//! labels (kept for evaluation only). Weak supervision lives in [`Bag`]s that
//! index into a dataset, or in a [`PuDataset`] split.
//!
//! File formats:
//!
//! - instance CSV: header row, numeric feature columns, optional `label`
//!   column holding `0`/`1`;
//! - bag file: JSON Lines, one `{"id", "label", "instances"}` record per bag,
//!   where `label` is one of `{"proportion": f}`, `{"max_label": b}`,
//!   `{"pu_selection": [b, ...]}`;
//! - PU split: one JSON object with `alpha`, `c`, `positive_indices`,
//!   `unlabeled_indices`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};
use crate::losses::{estimate_mixture_proportion, MixtureEstimate, COUNT_INTEGRALITY_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Option<Vec<bool>>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Option<Vec<bool>>) -> Result<Self> {
        let names = (0..dim).map(|j| format!("f{j}")).collect();
        Self::with_names(features, dim, labels, names)
    }

    pub fn with_names(
        features: Vec<f64>,
        dim: usize,
        labels: Option<Vec<bool>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("feature dimension must be positive"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "{} values do not form rows of width {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::arg(format!("{} labels for {n} rows", l.len())));
            }
        }
        if feature_names.len() != dim {
            return Err(Error::arg("one feature name per column is required"));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<bool> {
        self.labels.as_ref().map(|l| l[i])
    }

    fn require_labels(&self, what: &str) -> Result<&[bool]> {
        self.labels()
            .ok_or_else(|| Error::arg(format!("{what} needs a dataset with true labels")))
    }

    /// Indices of instances whose true label is `label`.
    pub fn indices_with_label(&self, label: bool) -> Result<Vec<usize>> {
        let labels = self.require_labels("label lookup")?;
        Ok((0..labels.len()).filter(|&i| labels[i] == label).collect())
    }

    /// Row-major features of the given rows, in order.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.gather(indices),
            dim: self.dim,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(File::create(path)?)
    }

    /// Instance CSV with the feature names as header and a trailing `label`
    /// column when labels are present. Floats use shortest round-trip form.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push("label");
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = self.label(i) {
                rec.push(if l { "1" } else { "0" }.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Zero mean, unit variance per column, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns keep a scale of 1.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Empty("cannot standardize an empty dataset".into()));
        }
        let d = data.dim();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(data.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.dim() != self.mean.len() {
            return Err(Error::arg(format!(
                "standardizer fitted on {} columns, data has {}",
                self.mean.len(),
                data.dim()
            )));
        }
        let d = data.dim;
        for row in data.features.chunks_exact_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }
}

/// How a CSV column set maps to features and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    /// Column names for headerless files; `None` reads them from the first row.
    #[serde(default)]
    pub column_names: Option<Vec<String>>,
    #[serde(default)]
    pub label: Option<LabelSpec>,
    /// Columns one-hot encoded over the categories seen when fitting.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
    /// Lines starting with this byte are skipped.
    #[serde(default)]
    pub comment: Option<char>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub column: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    /// A file without the label column loads unlabeled instead of failing.
    #[serde(default)]
    pub optional: bool,
    /// Trailing character stripped from label values (adult.test writes `>50K.`).
    #[serde(default)]
    pub strip_suffix: Option<char>,
}

impl TabularSchema {
    /// Header row, numeric features, optional 0/1 `label` column.
    pub fn instance_csv() -> Self {
        TabularSchema {
            column_names: None,
            label: Some(LabelSpec {
                column: "label".into(),
                positive: vec!["1".into()],
                negative: vec!["0".into()],
                optional: true,
                strip_suffix: None,
            }),
            categorical: Vec::new(),
            ignore: Vec::new(),
            comment: None,
        }
    }

    /// UCI Adult `adult.data` / `adult.test` layout.
    pub fn adult() -> Self {
        let columns = [
            "age",
            "workclass",
            "fnlwgt",
            "education",
            "education-num",
            "marital-status",
            "occupation",
            "relationship",
            "race",
            "sex",
            "capital-gain",
            "capital-loss",
            "hours-per-week",
            "native-country",
            "income",
        ];
        TabularSchema {
            column_names: Some(columns.iter().map(|s| s.to_string()).collect()),
            label: Some(LabelSpec {
                column: "income".into(),
                positive: vec![">50K".into()],
                negative: vec!["<=50K".into()],
                optional: false,
                strip_suffix: Some('.'),
            }),
            categorical: [
                "workclass",
                "education",
                "marital-status",
                "occupation",
                "relationship",
                "race",
                "sex",
                "native-country",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            ignore: Vec::new(),
            comment: Some('|'),
        }
    }
}

/// Parsed cells of a CSV file with their source line numbers.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

pub fn read_table(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<RawTable> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::Parse {
        path: path.clone(),
        line: 0,
        message: format!("cannot open: {e}"),
    })?;
    let mut builder = csv::ReaderBuilder::new();
    builder
        .has_headers(schema.column_names.is_none())
        .trim(csv::Trim::All)
        .flexible(true);
    if let Some(c) = schema.comment {
        builder.comment(Some(c as u8));
    }
    let mut reader = builder.from_reader(file);
    let header: Vec<String> = match &schema.column_names {
        Some(names) => names.clone(),
        None => reader.headers()?.iter().map(str::to_string).collect(),
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path,
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(RawTable { path, header, rows })
}

/// Column-to-feature mapping fitted on one table and reusable on others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub schema: TabularSchema,
    /// Feature columns in file order with their categories (empty for numeric).
    pub columns: Vec<(String, Vec<String>)>,
}

impl TabularEncoder {
    pub fn fit(table: &RawTable, schema: &TabularSchema) -> Result<Self> {
        let label_col = schema.label.as_ref().map(|l| l.column.as_str());
        for name in schema.categorical.iter().chain(&schema.ignore) {
            if !table.header.contains(name) {
                return Err(Error::Parse {
                    path: table.path.clone(),
                    line: 1,
                    message: format!("schema column {name:?} not in file"),
                });
            }
        }
        let mut columns = Vec::new();
        for (j, name) in table.header.iter().enumerate() {
            if Some(name.as_str()) == label_col || schema.ignore.contains(name) {
                continue;
            }
            if schema.categorical.contains(name) {
                let cats: BTreeSet<&str> = table.rows.iter().map(|(_, r)| r[j].as_str()).collect();
                columns.push((name.clone(), cats.into_iter().map(str::to_string).collect()));
            } else {
                columns.push((name.clone(), Vec::new()));
            }
        }
        if columns.is_empty() {
            return Err(Error::arg("schema leaves no feature columns"));
        }
        Ok(TabularEncoder {
            schema: schema.clone(),
            columns,
        })
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (name, cats) in &self.columns {
            if cats.is_empty() {
                names.push(name.clone());
            } else {
                names.extend(cats.iter().map(|c| format!("{name}={c}")));
            }
        }
        names
    }

    /// Encodes rows; categories unseen at fit time are rejected.
    pub fn encode(&self, table: &RawTable) -> Result<Dataset> {
        let err = |line: usize, message: String| Error::Parse {
            path: table.path.clone(),
            line,
            message,
        };
        let position = |name: &str| table.header.iter().position(|h| h == name);
        let mut col_idx = Vec::with_capacity(self.columns.len());
        for (name, _) in &self.columns {
            col_idx.push(position(name).ok_or_else(|| err(1, format!("missing column {name:?}")))?);
        }
        let label_idx = match &self.schema.label {
            Some(spec) => match position(&spec.column) {
                Some(j) => Some((j, spec)),
                None if spec.optional => None,
                None => return Err(err(1, format!("missing label column {:?}", spec.column))),
            },
            None => None,
        };

        let names = self.feature_names();
        let dim = names.len();
        let mut features = Vec::with_capacity(table.rows.len() * dim);
        let mut labels = label_idx.map(|_| Vec::with_capacity(table.rows.len()));
        for (line, row) in &table.rows {
            for ((name, cats), &j) in self.columns.iter().zip(&col_idx) {
                let cell = &row[j];
                if cats.is_empty() {
                    let v: f64 = cell.parse().map_err(|_| {
                        err(*line, format!("column {name:?}: {cell:?} is not a number"))
                    })?;
                    features.push(v);
                } else {
                    let hit = cats
                        .binary_search_by(|c| c.as_str().cmp(cell))
                        .map_err(|_| {
                            err(*line, format!("column {name:?}: unknown category {cell:?}"))
                        })?;
                    features.extend((0..cats.len()).map(|c| if c == hit { 1.0 } else { 0.0 }));
                }
            }
            if let (Some((j, spec)), Some(labels)) = (label_idx, labels.as_mut()) {
                let mut value = row[j].as_str();
                if let Some(suffix) = spec.strip_suffix {
                    value = value.strip_suffix(suffix).unwrap_or(value);
                }
                if spec.positive.iter().any(|p| p == value) {
                    labels.push(true);
                } else if spec.negative.iter().any(|p| p == value) {
                    labels.push(false);
                } else {
                    return Err(err(*line, format!("unrecognized label {value:?}")));
                }
            }
        }
        Dataset::with_names(features, dim, labels, names)
    }
}

/// Reads a CSV, fits the encoder on it, and returns both.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &TabularSchema,
) -> Result<(Dataset, TabularEncoder)> {
    let table = read_table(path, schema)?;
    let encoder = TabularEncoder::fit(&table, schema)?;
    let data = encoder.encode(&table)?;
    Ok((data, encoder))
}

/// Reads a CSV with an encoder fitted elsewhere (e.g. the training file).
pub fn load_csv_with(path: impl AsRef<Path>, encoder: &TabularEncoder) -> Result<Dataset> {
    let table = read_table(path, &encoder.schema)?;
    encoder.encode(&table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakLabel {
    /// Fraction of positives in the bag.
    Proportion(f64),
    /// Whether the bag holds at least one positive.
    MaxLabel(bool),
    /// Per-instance labeled-positive flags.
    PuSelection(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: usize,
    #[serde(rename = "instances")]
    pub instance_indices: Vec<usize>,
    #[serde(rename = "label")]
    pub weak_label: WeakLabel,
}

impl Bag {
    pub fn new(id: usize, instance_indices: Vec<usize>, weak_label: WeakLabel) -> Result<Self> {
        let bag = Bag {
            id,
            instance_indices,
            weak_label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.instance_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        if k == 0 {
            return Err(Error::arg(format!("bag {} is empty", self.id)));
        }
        match &self.weak_label {
            WeakLabel::Proportion(p) => {
                let count = p * k as f64;
                if !(0.0..=1.0).contains(p) || (count - count.round()).abs() > COUNT_INTEGRALITY_TOL
                {
                    return Err(Error::arg(format!(
                        "bag {}: proportion {p} is not a count over {k} instances",
                        self.id
                    )));
                }
            }
            WeakLabel::PuSelection(flags) if flags.len() != k => {
                return Err(Error::arg(format!(
                    "bag {}: {} selection flags for {k} instances",
                    self.id,
                    flags.len()
                )));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if let Some(&i) = self.instance_indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::arg(format!(
                "bag {} references row {i} of a {}-row dataset",
                self.id,
                data.len()
            )));
        }
        Ok(())
    }
}

pub fn write_bags_to<W: Write>(writer: W, bags: &[Bag]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for bag in bags {
        serde_json::to_writer(&mut w, bag)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bags(path: impl AsRef<Path>, bags: &[Bag]) -> Result<()> {
    write_bags_to(File::create(path)?, bags)
}

pub fn read_bags_from<R: Read>(reader: R, path: &Path) -> Result<Vec<Bag>> {
    let mut bags = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let bag: Bag = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        bag.validate().map_err(|e| parse_err(e.to_string()))?;
        bags.push(bag);
    }
    Ok(bags)
}

pub fn read_bags(path: impl AsRef<Path>) -> Result<Vec<Bag>> {
    let path = path.as_ref();
    read_bags_from(File::open(path)?, path)
}

/// Labeled positives and unlabeled instances, as indices into a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuDataset {
    pub alpha: f64,
    pub c: f64,
    pub positive_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

impl PuDataset {
    /// Empirical `p(labeled)`.
    pub fn labeled_fraction(&self) -> f64 {
        let total = self.positive_indices.len() + self.unlabeled_indices.len();
        self.positive_indices.len() as f64 / total as f64
    }

    /// Mixture proportion implied by the class prior and the labeled fraction.
    pub fn mixture_estimate(&self) -> Result<MixtureEstimate> {
        estimate_mixture_proportion(self.alpha, self.labeled_fraction())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Result of LLP bag construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LlpBags {
    pub bags: Vec<Bag>,
    /// Bags whose sampled count had to be clamped to what the class pools allow.
    pub clamped: usize,
}

/// Bags of `bag_size` instances whose positive fraction is drawn from
/// `Uniform(lo, hi)` and quantized to the nearest `s / bag_size`.
///
/// Each bag samples its positives and negatives without replacement; bags
/// draw independently, so instances may appear in several bags.
pub fn make_llp_bags(
    data: &Dataset,
    bag_size: usize,
    proportion_range: (f64, f64),
    count: usize,
    seed: u64,
) -> Result<LlpBags> {
    let (lo, hi) = proportion_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::arg(format!(
            "proportion range [{lo}, {hi}] is not inside [0, 1]"
        )));
    }
    if bag_size == 0 {
        return Err(Error::arg("bag size must be positive"));
    }
    let pos = data.indices_with_label(true)?;
    let neg = data.indices_with_label(false)?;
    let s_min = bag_size.saturating_sub(neg.len());
    let s_max = pos.len().min(bag_size);
    if s_min > s_max {
        return Err(Error::Generation(format!(
            "{} instances cannot fill a bag of {bag_size}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::with_capacity(count);
    let mut clamped = 0;
    for id in 0..count {
        let target = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        let wanted = (target * bag_size as f64).round() as usize;
        let s = wanted.clamp(s_min, s_max);
        if s != wanted {
            clamped += 1;
        }
        let mut members: Vec<usize> = index::sample(&mut rng, pos.len(), s)
            .into_iter()
            .map(|i| pos[i])
            .chain(
                index::sample(&mut rng, neg.len(), bag_size - s)
                    .into_iter()
                    .map(|i| neg[i]),
            )
            .collect();
        members.shuffle(&mut rng);
        bags.push(Bag {
            id,
            instance_indices: members,
            weak_label: WeakLabel::Proportion(s as f64 / bag_size as f64),
        });
    }
    Ok(LlpBags { bags, clamped })
}

/// Balanced MIL bags with sizes `max(2, round(Normal(mean, std)))`.
///
/// Targets alternate positive/negative starting with positive. A negative
/// bag is drawn uniformly from the negative instances, which is the
/// conditional distribution rejection sampling would produce; a positive bag
/// is drawn from all instances and redrawn until it holds a positive.
pub fn make_mil_bags<F>(
    data: &Dataset,
    size_mean: f64,
    size_std: f64,
    is_positive: F,
    count: usize,
    seed: u64,
) -> Result<Vec<Bag>>
where
    F: Fn(usize) -> bool,
{
    const MAX_REDRAWS: usize = 100_000;
    if !(size_mean > 0.0) || !(size_std >= 0.0) {
        return Err(Error::arg(
            "bag size mean must be positive and std non-negative",
        ));
    }
    let n = data.len();
    let positive: Vec<bool> = (0..n).map(&is_positive).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| !positive[i]).collect();
    if neg.is_empty() {
        return Err(Error::Generation(
            "no negative instances to form a negative bag".into(),
        ));
    }
    if neg.len() == n {
        return Err(Error::Generation(
            "no positive instances to form a positive bag".into(),
        ));
    }
    let size_dist = Normal::new(size_mean, size_std)
        .map_err(|e| Error::arg(format!("bag size distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::with_capacity(count);
    for id in 0..count {
        let size = (size_dist.sample(&mut rng).round().max(2.0) as usize).min(n);
        let want_positive = id % 2 == 0;
        let members: Vec<usize> = if want_positive {
            let mut attempt = 0;
            loop {
                let draw = index::sample(&mut rng, n, size).into_vec();
                if draw.iter().any(|&i| positive[i]) {
                    break draw;
                }
                attempt += 1;
                if attempt == MAX_REDRAWS {
                    return Err(Error::Generation(format!(
                        "no positive bag of size {size} after {MAX_REDRAWS} draws"
                    )));
                }
            }
        } else {
            if size > neg.len() {
                return Err(Error::Generation(format!(
                    "only {} negatives for a negative bag of size {size}",
                    neg.len()
                )));
            }
            index::sample(&mut rng, neg.len(), size)
                .into_iter()
                .map(|i| neg[i])
                .collect()
        };
        let label = members.iter().any(|&i| positive[i]);
        bags.push(Bag {
            id,
            instance_indices: members,
            weak_label: WeakLabel::MaxLabel(label),
        });
    }
    Ok(bags)
}

/// SCAR positive-unlabeled split with class prior `alpha` and label frequency `c`.
///
/// The dataset is subsampled (without replacement) to the largest subset
/// whose positive fraction is `alpha`; each kept positive is then labeled
/// independently with probability `c`.
pub fn make_pu_split(data: &Dataset, alpha: f64, c: f64, seed: u64) -> Result<PuDataset> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("class prior {alpha} outside (0, 1)")));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::arg(format!("label frequency {c} outside (0, 1]")));
    }
    let pos = data.indices_with_label(true)?;
    let neg = data.indices_with_label(false)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Generation(format!(
            "class prior {alpha} needs both classes; found {} positives, {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let total = (pos.len() as f64 / alpha)
        .min(neg.len() as f64 / (1.0 - alpha))
        .floor();
    let keep_pos = ((alpha * total).round() as usize).min(pos.len());
    let keep_neg = (total as usize - keep_pos).min(neg.len());
    if keep_pos == 0 || keep_neg == 0 {
        return Err(Error::Generation(format!(
            "class prior {alpha} is infeasible for this data"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept_pos: Vec<usize> = index::sample(&mut rng, pos.len(), keep_pos)
        .into_iter()
        .map(|i| pos[i])
        .collect();
    let kept_neg: Vec<usize> = index::sample(&mut rng, neg.len(), keep_neg)
        .into_iter()
        .map(|i| neg[i])
        .collect();
    kept_pos.sort_unstable();

    let mut positive_indices = Vec::new();
    let mut unlabeled_indices = kept_neg;
    for i in kept_pos {
        if rng.random::<f64>() < c {
            positive_indices.push(i);
        } else {
            unlabeled_indices.push(i);
        }
    }
    unlabeled_indices.sort_unstable();
    Ok(PuDataset {
        alpha,
        c,
        positive_indices,
        unlabeled_indices,
    })
}

/// `n_neg` + `n_pos` points from two unit-variance isotropic Gaussians whose
/// means sit at `-separation/2` and `+separation/2` on the first axis.
/// Labels are shuffled into a random order.
pub fn make_gaussians_with_counts(
    n_neg: usize,
    n_pos: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 || !(separation >= 0.0) {
        return Err(Error::arg(
            "dimension must be positive and separation non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = std::iter::repeat_n(false, n_neg)
        .chain(std::iter::repeat_n(true, n_pos))
        .collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(labels.len() * dim);
    for &y in &labels {
        let shift = if y {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if j == 0 { z + shift } else { z });
        }
    }
    Dataset::new(features, dim, Some(labels))
}

/// Balanced two-Gaussian dataset of `n` points (`n` even).
pub fn make_synthetic_gaussians(
    n: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::arg(format!("n = {n} must be even")));
    }
    make_gaussians_with_counts(n / 2, n / 2, dim, separation, seed)
}

/// Accuracy of the Bayes classifier for the two-Gaussian model when a
/// fraction `prior` of points is positive.
pub fn gaussian_bayes_accuracy(separation: f64, prior: f64) -> f64 {
    let phi = NormalDist::standard();
    if separation == 0.0 {
        return prior.max(1.0 - prior);
    }
    let half = separation / 2.0;
    // posterior log-odds = ln(prior / (1 - prior)) + separation * x
    let threshold = ((1.0 - prior) / prior).ln() / separation;
    prior * (1.0 - phi.cdf(threshold - half)) + (1.0 - prior) * phi.cdf(threshold + half)
}

/// AUC of the Bayes scorer (projection on the first axis): `Phi(sep / sqrt 2)`.
pub fn gaussian_bayes_auc(separation: f64) -> f64 {
    NormalDist::standard().cdf(separation / std::f64::consts::SQRT_2)
}

/// Deterministic stratified holdout: items are shuffled, stably grouped by
/// stratum, then every item whose slot crosses a multiple of `1/fraction`
/// goes to validation. Returns `(train, validation)`, both sorted.
pub fn stratified_holdout<K: Ord + Clone>(
    strata: &[K],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::arg(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n = strata.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for i in order {
        groups.entry(strata[i].clone()).or_default().push(i);
    }
    let arranged: Vec<usize> = groups.into_values().flatten().collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (slot, &i) in arranged.iter().enumerate() {
        if (slot + 1) * n_val / n.max(1) > slot * n_val / n.max(1) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn labeled(n_pos: usize, n_neg: usize) -> Dataset {
        make_gaussians_with_counts(n_neg, n_pos, 2, 4.0, 1).unwrap()
    }

    #[test]
    fn numeric_csv_with_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "a,b,label\n1,2,0\n3.5,-1,1\n0,0,1\n").unwrap();
        let (data, enc) = load_csv(&path, &TabularSchema::instance_csv()).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.row(1), &[3.5, -1.0]);
        assert_eq!(data.labels().unwrap(), &[false, true, true]);
        assert_eq!(enc.feature_names(), vec!["a", "b"]);
    }

    #[test]
    fn csv_without_label_loads_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let (data, _) = load_csv(&path, &TabularSchema::instance_csv()).unwrap();
        assert!(data.labels().is_none());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,label\n1,0\nx,1\n").unwrap();
        match load_csv(&path, &TabularSchema::instance_csv()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("not a number"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "a,label\n1,0\n2\n").unwrap();
        assert!(matches!(
            load_csv(&path, &TabularSchema::instance_csv()),
            Err(Error::Parse { line: 3, .. })
        ));
        std::fs::write(&path, "a,label\n1,2\n").unwrap();
        assert!(matches!(
            load_csv(&path, &TabularSchema::instance_csv()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(load_csv(
            dir.path().join("missing.csv"),
            &TabularSchema::instance_csv()
        )
        .is_err());
    }

    #[test]
    fn categorical_one_hot_rejects_unknown_categories() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.csv");
        let test = dir.path().join("test.csv");
        std::fs::write(&train, "x,color,y\n1,red,yes\n2,blue,no\n").unwrap();
        std::fs::write(&test, "x,color,y\n1,blue,no.\n2,green,no\n").unwrap();
        let schema = TabularSchema {
            column_names: None,
            label: Some(LabelSpec {
                column: "y".into(),
                positive: vec!["yes".into()],
                negative: vec!["no".into()],
                optional: false,
                strip_suffix: Some('.'),
            }),
            categorical: vec!["color".into()],
            ignore: vec![],
            comment: None,
        };
        let (data, enc) = load_csv(&train, &schema).unwrap();
        assert_eq!(enc.feature_names(), vec!["x", "color=blue", "color=red"]);
        assert_eq!(data.row(0), &[1.0, 0.0, 1.0]);
        match load_csv_with(&test, &enc) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("green"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let mut d = Dataset::new(vec![1.0, 5.0, 3.0, 5.0], 2, None).unwrap();
        let s = Standardizer::fit(&d).unwrap();
        s.apply(&mut d).unwrap();
        assert_eq!(d.features(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn llp_bags_hold_their_stated_proportion() {
        let data = labeled(300, 300);
        let out = make_llp_bags(&data, 8, (0.0, 1.0), 200, 5).unwrap();
        assert_eq!(out.bags.len(), 200);
        for bag in &out.bags {
            assert_eq!(bag.len(), 8);
            let uniq: BTreeSet<_> = bag.instance_indices.iter().collect();
            assert_eq!(uniq.len(), 8);
            let positives = bag
                .instance_indices
                .iter()
                .filter(|&&i| data.label(i).unwrap())
                .count();
            assert_eq!(
                WeakLabel::Proportion(positives as f64 / 8.0),
                bag.weak_label
            );
        }
    }

    #[test]
    fn llp_full_range_gives_all_positive_bags() {
        let data = labeled(50, 50);
        let out = make_llp_bags(&data, 4, (1.0, 1.0), 10, 1).unwrap();
        assert!(out
            .bags
            .iter()
            .all(|b| b.weak_label == WeakLabel::Proportion(1.0)));
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn llp_clamps_when_a_class_runs_short() {
        let data = labeled(3, 50);
        let out = make_llp_bags(&data, 8, (1.0, 1.0), 4, 1).unwrap();
        assert_eq!(out.clamped, 4);
        assert!(out
            .bags
            .iter()
            .all(|b| b.weak_label == WeakLabel::Proportion(3.0 / 8.0)));
        assert!(make_llp_bags(&labeled(1, 1), 8, (0.0, 1.0), 1, 1).is_err());
        assert!(make_llp_bags(&data, 8, (0.6, 0.4), 1, 1).is_err());
    }

    #[test]
    fn mil_bags_are_balanced_and_labeled_by_max() {
        let data = labeled(200, 800);
        let labels = data.labels().unwrap().to_vec();
        let bags = make_mil_bags(&data, 10.0, 2.0, |i| labels[i], 50, 3).unwrap();
        let positive = bags
            .iter()
            .filter(|b| b.weak_label == WeakLabel::MaxLabel(true))
            .count();
        assert_eq!(positive, 25);
        for bag in &bags {
            assert!(bag.len() >= 2);
            let any = bag.instance_indices.iter().any(|&i| labels[i]);
            assert_eq!(bag.weak_label, WeakLabel::MaxLabel(any));
        }
    }

    #[test]
    fn mil_bag_sizes_follow_the_spec() {
        let data = labeled(100, 100);
        let labels = data.labels().unwrap().to_vec();
        let bags = make_mil_bags(&data, 5.0, 0.0, |i| labels[i], 20, 3).unwrap();
        assert!(bags.iter().all(|b| b.len() == 5));
        let tiny = make_mil_bags(&data, 0.5, 0.0, |i| labels[i], 4, 3).unwrap();
        assert!(tiny.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn mil_needs_both_kinds_of_instance() {
        let data = labeled(10, 10);
        assert!(matches!(
            make_mil_bags(&data, 5.0, 1.0, |_| true, 4, 0),
            Err(Error::Generation(_))
        ));
        assert!(make_mil_bags(&data, 5.0, 1.0, |_| false, 4, 0).is_err());
    }

    #[test]
    fn pu_split_with_full_label_frequency_has_clean_unlabeled_set() {
        let data = labeled(500, 500);
        let split = make_pu_split(&data, 0.5, 1.0, 2).unwrap();
        assert_eq!(split.positive_indices.len(), 500);
        assert!(split
            .unlabeled_indices
            .iter()
            .all(|&i| !data.label(i).unwrap()));
        assert_eq!(split.mixture_estimate().unwrap().beta, 0.0);
    }

    #[test]
    fn pu_split_subsamples_to_the_prior() {
        let data = labeled(900, 300);
        let split = make_pu_split(&data, 0.5, 0.5, 4).unwrap();
        let all: Vec<usize> = split
            .positive_indices
            .iter()
            .chain(&split.unlabeled_indices)
            .copied()
            .collect();
        let pos = all.iter().filter(|&&i| data.label(i).unwrap()).count();
        assert_eq!(all.len(), 600);
        assert_eq!(pos, 300);
        assert!(split
            .positive_indices
            .iter()
            .all(|&i| data.label(i).unwrap()));
        assert!(make_pu_split(&labeled(10, 0), 0.5, 0.5, 1).is_err());
        assert!(make_pu_split(&data, 1.0, 0.5, 1).is_err());
    }

    #[test]
    fn gaussians_and_bayes_accuracy() {
        let d = make_synthetic_gaussians(1000, 3, 4.0, 8).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.indices_with_label(true).unwrap().len(), 500);
        assert!(make_synthetic_gaussians(999, 3, 4.0, 8).is_err());
        assert_eq!(gaussian_bayes_accuracy(0.0, 0.5), 0.5);
        // Phi(2)
        let acc = gaussian_bayes_accuracy(4.0, 0.5);
        assert!((acc - 0.977_249_868_051_820_8).abs() < 1e-9, "{acc}");
        let empirical = (0..d.len())
            .filter(|&i| (d.row(i)[0] > 0.0) == d.label(i).unwrap())
            .count() as f64
            / 1000.0;
        assert!((empirical - 0.977).abs() < 0.02);
    }

    #[test]
    fn bag_file_round_trip() {
        let bags = vec![
            Bag::new(0, vec![3, 1, 4], WeakLabel::Proportion(1.0 / 3.0)).unwrap(),
            Bag::new(1, vec![5, 9], WeakLabel::MaxLabel(true)).unwrap(),
            Bag::new(
                2,
                vec![2, 6, 5],
                WeakLabel::PuSelection(vec![true, false, false]),
            )
            .unwrap(),
        ];
        let mut buf = Vec::new();
        write_bags_to(&mut buf, &bags).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"proportion\":0.3333333333333333"));
        let back = read_bags_from(Cursor::new(&buf), Path::new("mem")).unwrap();
        assert_eq!(back, bags);
        let mut again = Vec::new();
        write_bags_to(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn bag_file_rejects_bad_records() {
        let text = "{\"id\":0,\"instances\":[1],\"label\":{\"max_label\":true}}\n{\"id\":1,\"instances\":[1,2],\"label\":{\"proportion\":0.3}}\n";
        match read_bags_from(Cursor::new(text), Path::new("b.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(Bag::new(0, vec![], WeakLabel::MaxLabel(false)).is_err());
        assert!(Bag::new(0, vec![1], WeakLabel::PuSelection(vec![])).is_err());
    }

    #[test]
    fn holdout_is_stratified_and_deterministic() {
        let strata: Vec<u8> = (0..80).map(|i| (i % 4) as u8).collect();
        let (train, val) = stratified_holdout(&strata, 0.125, 3).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(train.len() + val.len(), 80);
        for s in 0..4u8 {
            let c = val.iter().filter(|&&i| strata[i] == s).count();
            assert!((2..=3).contains(&c));
        }
        assert_eq!(stratified_holdout(&strata, 0.125, 3).unwrap(), (train, val));
        let (all, none) = stratified_holdout(&strata, 0.0, 3).unwrap();
        assert_eq!((all.len(), none.len()), (80, 0));
    }
}
