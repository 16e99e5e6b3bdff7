//! Datasets: a synthetic Gaussian-mixture generator with label-noise ground
//! truth, JSONL/CSV loaders and writers, and seeded train/eval splits.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::Tensor;

/// Radius of the sphere the class means are drawn on.
pub const MEAN_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    #[default]
    All,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    noisy: Vec<bool>,
    classes: usize,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        ids: Vec<u64>,
        noisy: Vec<bool>,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Schema(format!(
                "feature matrix {:?} does not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if ids.len() != labels.len() || noisy.len() != labels.len() {
            return Err(Error::Schema("ids/noise tags must match the label count".into()));
        }
        if !features.is_finite() {
            return Err(Error::Schema("features must be finite".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Schema(format!("label {bad} outside {classes} classes")));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Schema(format!("duplicate sample id {dup}")));
        }
        Ok(Dataset {
            features,
            labels,
            ids,
            noisy,
            classes,
            split: SplitTag::All,
            provenance: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Ground-truth label-noise tags (all false for loaded data unless given).
    pub fn noisy(&self) -> &[bool] {
        &self.noisy
    }

    pub fn noisy_count(&self) -> usize {
        self.noisy.iter().filter(|&&n| n).count()
    }

    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Row `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Batch {
        self.batch(&[i]).expect("row in range")
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.ids[r]).collect(),
        )
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone(), self.ids.clone())
            .expect("dataset is non-empty")
    }

    fn subset(&self, rows: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows).expect("rows in range"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            noisy: rows.iter().map(|&r| self.noisy[r]).collect(),
            classes: self.classes,
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// Seeded shuffle, then the first `round(eval_frac·n)` rows become the
    /// eval side.
    pub fn split(&self, eval_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(eval_frac > 0.0 && eval_frac < 1.0) {
            return Err(Error::Config(format!(
                "eval fraction must be in (0, 1), got {eval_frac}"
            )));
        }
        let n = self.len();
        let n_eval = (eval_frac * n as f64).round() as usize;
        if n_eval == 0 || n_eval == n {
            return Err(Error::Config(format!(
                "eval fraction {eval_frac} leaves an empty side for {n} samples"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (eval, train) = order.split_at(n_eval);
        Ok((self.subset(train, SplitTag::Train), self.subset(eval, SplitTag::Eval)))
    }

    /// Standardizes every feature column to zero mean and unit variance.
    /// Constant columns are centered only.
    pub fn standardize(&mut self) {
        let (n, d) = (self.len(), self.dim());
        for j in 0..d {
            let mean = (0..n).map(|i| self.features.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (self.features.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                let v = (self.features.get(i, j) - mean) / sd;
                self.features.set(i, j, v);
            }
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            let rec = JsonRecord {
                id: Some(self.ids[i]),
                features: self.features.row(i).to_vec(),
                label: self.labels[i],
                noisy: self.noisy[i].then_some(true),
            };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Header `id,f0,..,f{d-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        header.push("label".into());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].to_string()];
            row.extend(self.features.row(i).iter().map(f64::to_string));
            row.push(self.labels[i].to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    features: Vec<f64>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noisy: Option<bool>,
}

/// Gaussian mixture: class means on a sphere of radius 3, unit covariance,
/// uniform class draws. Exactly `⌊label_noise_frac·n⌋` samples receive a
/// uniformly drawn wrong label and are tagged noisy. Features are
/// standardized per column afterwards.
pub fn gen_gaussian_mixture(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    label_noise_frac: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..1.0).contains(&label_noise_frac) {
        return Err(Error::Config(format!(
            "label noise fraction must be in [0, 1), got {label_noise_frac}"
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::Config("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| MEAN_RADIUS * x / norm).collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..classes);
        labels.push(c);
        for mu in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + z);
        }
    }
    let n_noisy = (label_noise_frac * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut noisy = vec![false; n];
    for &i in &order[..n_noisy] {
        let shift = rng.random_range(1..classes);
        labels[i] = (labels[i] + shift) % classes;
        noisy[i] = true;
    }
    let mut ds = Dataset::new(
        Tensor::matrix(n, d, data)?,
        labels,
        (0..n as u64).collect(),
        noisy,
        classes,
    )?;
    ds.standardize();
    ds.provenance = format!(
        "gaussian_mixture(seed={seed}, n={n}, d={d}, classes={classes}, label_noise={label_noise_frac})"
    );
    Ok(ds)
}

fn finish_loaded(
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    noisy: Vec<bool>,
    source: &Path,
) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = rows[0].len();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let n = rows.len();
    let features = Tensor::matrix(n, d, rows.into_iter().flatten().collect())
        .map_err(|e| Error::Schema(e.to_string()))?;
    let mut ds = Dataset::new(features, labels, ids, noisy, classes)?;
    ds.provenance = format!("loaded from {}", source.display());
    Ok(ds)
}

/// One JSON object per line: `features` (numbers), `label` (integer),
/// optional `id`, optional `noisy`. Missing ids default to the zero-based
/// record index. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    parse_jsonl(File::open(path)?, path)
}

fn parse_jsonl(reader: impl Read, source: &Path) -> Result<Dataset> {
    let mut rows = Vec::new();
    let (mut labels, mut ids, mut noisy) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        if let Some(first) = rows.first().map(Vec::len) {
            if rec.features.len() != first {
                return Err(Error::Schema(format!(
                    "line {}: {} features, expected {first}",
                    lineno + 1,
                    rec.features.len()
                )));
            }
        }
        ids.push(rec.id.unwrap_or(rows.len() as u64));
        labels.push(rec.label);
        noisy.push(rec.noisy.unwrap_or(false));
        rows.push(rec.features);
    }
    finish_loaded(rows, labels, ids, noisy, source)
}

/// Header row required; the label is the last column. A first column named
/// `id` supplies sample ids, otherwise ids are the zero-based record index.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => csv_io(e),
            _ => Error::Parse {
                line: 1,
                detail: e.to_string(),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let has_id = headers.get(0).is_some_and(|h| h.trim() == "id");
    let min_cols = if has_id { 3 } else { 2 };
    if headers.len() < min_cols {
        return Err(Error::Schema(format!(
            "header has {} columns; need features and a label",
            headers.len()
        )));
    }
    let mut rows = Vec::new();
    let (mut labels, mut ids) = (Vec::new(), Vec::new());
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                Error::Schema(format!("line {line}: inconsistent column count"))
            }
            _ => Error::Parse {
                line,
                detail: e.to_string(),
            },
        })?;
        let parse_err = |what: &str, field: &str| Error::Parse {
            line,
            detail: format!("bad {what} {field:?}"),
        };
        let fields: Vec<&str> = rec.iter().map(str::trim).collect();
        let (id, feats) = if has_id {
            let id = fields[0].parse::<u64>().map_err(|_| parse_err("id", fields[0]))?;
            (id, &fields[1..fields.len() - 1])
        } else {
            (rows.len() as u64, &fields[..fields.len() - 1])
        };
        let label_field = fields[fields.len() - 1];
        let label = label_field
            .parse::<usize>()
            .map_err(|_| parse_err("label", label_field))?;
        let feats = feats
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err("feature", f)))
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        labels.push(label);
        rows.push(feats);
    }
    let n = rows.len();
    finish_loaded(rows, labels, ids, vec![false; n], path)
}

/// Picks the loader from the file extension (`.jsonl`/`.json` or `.csv`).
pub fn load_path(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_jsonl(path),
        Some("csv") => load_csv(path),
        other => Err(Error::Config(format!(
            "unrecognized dataset extension {other:?} for {}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_tags_are_exact() {
        let ds = gen_gaussian_mixture(3, 2000, 8, 10, 0.2).unwrap();
        assert_eq!(ds.noisy_count(), 400);
        let clean = gen_gaussian_mixture(3, 100, 8, 4, 0.0).unwrap();
        assert_eq!(clean.noisy_count(), 0);
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_gaussian_mixture(11, 50, 4, 3, 0.1).unwrap();
        assert_eq!(a, gen_gaussian_mixture(11, 50, 4, 3, 0.1).unwrap());
        assert_ne!(a, gen_gaussian_mixture(12, 50, 4, 3, 0.1).unwrap());
    }

    #[test]
    fn features_are_standardized() {
        let ds = gen_gaussian_mixture(5, 500, 6, 3, 0.0).unwrap();
        for j in 0..6 {
            let col: Vec<f64> = (0..500).map(|i| ds.features().get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_generator_config() {
        assert!(matches!(gen_gaussian_mixture(0, 10, 2, 1, 0.0), Err(Error::Config(_))));
        assert!(matches!(gen_gaussian_mixture(0, 10, 2, 3, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn noisy_labels_differ_from_originals() {
        let clean = gen_gaussian_mixture(9, 300, 4, 5, 0.0).unwrap();
        let noisy = gen_gaussian_mixture(9, 300, 4, 5, 0.3).unwrap();
        // The noise pass draws after all samples, so the clean prefix of the
        // stream (features and true labels) is shared.
        assert_eq!(clean.features(), noisy.features());
        for i in 0..300 {
            assert_eq!(noisy.noisy()[i], clean.labels()[i] != noisy.labels()[i]);
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = gen_gaussian_mixture(1, 10, 2, 2, 0.0).unwrap();
        let (tr, ev) = ds.split(0.5, 4).unwrap();
        assert_eq!((tr.len(), ev.len()), (5, 5));
        let ids: HashSet<u64> = tr.ids().iter().copied().collect();
        assert!(ev.ids().iter().all(|id| !ids.contains(id)));
        assert_eq!(ds.split(0.5, 4).unwrap(), (tr, ev));
        assert!(ds.split(0.01, 0).is_err());
        assert!(ds.split(1.0, 0).is_err());
    }

    #[test]
    fn jsonl_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        File::create(&empty).unwrap();
        assert!(matches!(load_jsonl(&empty), Err(Error::EmptyDataset)));

        let one = dir.path().join("one.jsonl");
        write!(File::create(&one).unwrap(), "{{\"features\":[1.0,2.5],\"label\":1}}").unwrap();
        let ds = load_jsonl(&one).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.ids(), &[0]);

        let bad = dir.path().join("bad.jsonl");
        write!(
            File::create(&bad).unwrap(),
            "{{\"features\":[1.0],\"label\":0}}\nnot json\n"
        )
        .unwrap();
        assert!(matches!(load_jsonl(&bad), Err(Error::Parse { line: 2, .. })));

        let ragged = dir.path().join("ragged.jsonl");
        write!(
            File::create(&ragged).unwrap(),
            "{{\"features\":[1.0],\"label\":0}}\r\n{{\"features\":[1.0,2.0],\"label\":1}}\r\n"
        )
        .unwrap();
        assert!(matches!(load_jsonl(&ragged), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write!(File::create(&p).unwrap(), "x,y,label\n0.5,1,0\n-2,3e-1,1").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.ids(), &[0, 1]);
        assert_eq!(ds.features().row(1), &[-2.0, 0.3]);

        let bad = dir.path().join("b.csv");
        write!(File::create(&bad).unwrap(), "x,label\n0.5,0\nfoo,1\n").unwrap();
        assert!(matches!(load_csv(&bad), Err(Error::Parse { line: 3, .. })));

        let ragged = dir.path().join("c.csv");
        write!(File::create(&ragged).unwrap(), "x,y,label\n0.5,1,0\n1,1\n").unwrap();
        assert!(matches!(load_csv(&ragged), Err(Error::Schema(_))));

        let empty = dir.path().join("d.csv");
        writeln!(File::create(&empty).unwrap(), "x,label").unwrap();
        assert!(matches!(load_csv(&empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_gaussian_mixture(21, 40, 5, 4, 0.25).unwrap();
        let j = dir.path().join("d.jsonl");
        ds.write_jsonl(&j).unwrap();
        let back = load_jsonl(&j).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.ids(), ds.ids());
        assert_eq!(back.noisy(), ds.noisy());

        let c = dir.path().join("d.csv");
        ds.write_csv(&c).unwrap();
        let back = load_csv(&c).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.ids(), ds.ids());
    }
}
