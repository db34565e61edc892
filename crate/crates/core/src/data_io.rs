//! Loading of cause-effect pair collections and CSV data, and flow archives.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discovery::Direction;
use crate::error::{Error, Result};
use crate::flow::FlowDocument;
use crate::training::{DataMatrix, FittedFlow, Scaler};

/// Minimum number of usable rows for a pair to be loaded.
pub const MIN_PAIR_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub id: String,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub truth: Option<Direction>,
    pub weight: Option<f64>,
    pub source: Option<PathBuf>,
    /// Rows removed because they held a non-finite value.
    pub dropped_rows: usize,
}

impl DatasetPair {
    pub fn new(id: impl Into<String>, x1: Vec<f64>, x2: Vec<f64>) -> Result<Self> {
        let mut pair = DatasetPair {
            id: id.into(),
            x1,
            x2,
            truth: None,
            weight: None,
            source: None,
            dropped_rows: 0,
        };
        pair.drop_non_finite()?;
        Ok(pair)
    }

    pub fn with_truth(mut self, truth: Direction) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    /// The same pair with the columns exchanged and the label reversed.
    pub fn swapped(&self) -> Self {
        DatasetPair {
            x1: self.x2.clone(),
            x2: self.x1.clone(),
            truth: self.truth.map(Direction::reversed),
            ..self.clone()
        }
    }

    fn drop_non_finite(&mut self) -> Result<()> {
        if self.x1.len() != self.x2.len() {
            return Err(Error::invalid(format!(
                "pair {}: columns have different lengths",
                self.id
            )));
        }
        let keep: Vec<bool> = self
            .x1
            .iter()
            .zip(&self.x2)
            .map(|(a, b)| a.is_finite() && b.is_finite())
            .collect();
        let before = self.x1.len();
        let mut it = keep.iter();
        self.x1.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.x2.retain(|_| *it.next().unwrap());
        self.dropped_rows += before - self.x1.len();
        if self.x1.len() < MIN_PAIR_ROWS {
            return Err(Error::DegenerateData(format!(
                "pair {} has {} usable rows, need {MIN_PAIR_ROWS}",
                self.id,
                self.x1.len()
            )));
        }
        Ok(())
    }
}

/// One parsed line of a pairs meta file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaEntry {
    pub id: String,
    /// One-based inclusive column ranges.
    pub cause: (usize, usize),
    pub effect: (usize, usize),
    pub weight: f64,
}

impl MetaEntry {
    pub fn is_scalar(&self) -> bool {
        self.cause.0 == self.cause.1 && self.effect.0 == self.effect.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPairs {
    pub pairs: Vec<DatasetPair>,
    /// Ids of pairs whose cause or effect spans several columns.
    pub skipped_multivariate: Vec<String>,
    /// Ids of scalar pairs that could not be used, with the reason.
    pub skipped_unusable: Vec<(String, String)>,
}

/// Parses a meta file with lines `id cause_start cause_end effect_start effect_end weight`.
pub fn parse_meta(path: &Path) -> Result<Vec<MetaEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let col = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(c) if c >= 1 => Ok(c),
                _ => Err(err(format!("bad column index {s:?}"))),
            }
        };
        let cause = (col(fields[1])?, col(fields[2])?);
        let effect = (col(fields[3])?, col(fields[4])?);
        if cause.0 > cause.1 || effect.0 > effect.1 {
            return Err(err("column range is reversed".into()));
        }
        let weight: f64 = fields[5]
            .parse()
            .ok()
            .filter(|w: &f64| w.is_finite() && *w >= 0.0)
            .ok_or_else(|| err(format!("bad weight {:?}", fields[5])))?;
        out.push(MetaEntry {
            id: fields[0].to_string(),
            cause,
            effect,
            weight,
        });
    }
    Ok(out)
}

/// Reads a whitespace-separated numeric table. Tokens that do not parse as
/// numbers are read as NaN so the row can be dropped later.
pub fn read_whitespace_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().unwrap_or(f64::NAN))
            .collect();
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the scalar pairs listed in `meta` from `dir/pair<id>.txt`, sorted by id.
pub fn load_pairs(dir: &Path, meta: &Path) -> Result<LoadedPairs> {
    let mut entries = parse_meta(meta)?;
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pairs = Vec::new();
    let mut skipped_multivariate = Vec::new();
    let mut skipped_unusable = Vec::new();
    for e in entries {
        if !e.is_scalar() {
            log::info!("skipping multivariate pair {}", e.id);
            skipped_multivariate.push(e.id);
            continue;
        }
        let truth = match (e.cause.0, e.effect.0) {
            (1, 2) => Direction::Forward,
            (2, 1) => Direction::Backward,
            _ => {
                skipped_unusable
                    .push((e.id.clone(), "cause/effect are not columns 1 and 2".into()));
                continue;
            }
        };
        let path = dir.join(format!("pair{}.txt", e.id));
        let rows = read_whitespace_table(&path)?;
        if rows.first().is_some_and(|r| r.len() < 2) {
            skipped_unusable.push((e.id.clone(), "data file has fewer than 2 columns".into()));
            continue;
        }
        let x1 = rows.iter().map(|r| r[0]).collect();
        let x2 = rows.iter().map(|r| r[1]).collect();
        match DatasetPair::new(e.id.clone(), x1, x2) {
            Ok(mut pair) => {
                if pair.dropped_rows > 0 {
                    log::info!(
                        "pair {}: dropped {} non-finite rows",
                        pair.id,
                        pair.dropped_rows
                    );
                }
                pair.truth = Some(truth);
                pair.weight = Some(e.weight);
                pair.source = Some(path);
                pairs.push(pair);
            }
            Err(err) => {
                log::warn!("skipping pair {}: {err}", e.id);
                skipped_unusable.push((e.id, err.to_string()));
            }
        }
    }
    Ok(LoadedPairs {
        pairs,
        skipped_multivariate,
        skipped_unusable,
    })
}

/// Reads a comma-separated numeric file.
pub fn load_csv(path: &Path, has_header: bool) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names = if has_header {
        Some(
            reader
                .headers()
                .map_err(|e| csv_error(path, e))?
                .iter()
                .map(str::to_string)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let mut width = names.as_ref().map(Vec::len);
    let mut n_rows = 0;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if record.iter().all(str::is_empty) {
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(parse_err(format!(
                    "expected {w} fields, found {}",
                    record.len()
                )));
            }
            None => width = Some(record.len()),
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        n_rows += 1;
    }
    let n_cols = width.unwrap_or(0);
    if n_rows == 0 {
        return Err(Error::DegenerateData(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let m = DataMatrix::from_flat(n_rows, n_cols, values)?;
    match names {
        Some(names) => m.with_column_names(names),
        None => Ok(m),
    }
}

/// Writes `m` as CSV with a header when the matrix has column names.
/// Values use the shortest representation that reads back exactly.
pub fn write_csv(m: &DataMatrix, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        if let Some(names) = m.column_names() {
            w.write_record(names).map_err(|e| csv_error(path, e))?;
        }
        for row in m.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &buf)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Saves a fitted flow, with its scaler and optional metadata, as JSON.
pub fn save_flow(
    fitted: &FittedFlow,
    path: &Path,
    metadata: Option<serde_json::Value>,
) -> Result<()> {
    let mut doc = FlowDocument::from_flow(&fitted.flow);
    doc.scaler = Some(fitted.scaler.to_document());
    doc.metadata = metadata.unwrap_or(serde_json::Value::Null);
    write_atomic(path, doc.to_json()?.as_bytes())
}

/// Loads a flow archive. A missing scaler means the flow works in original units.
pub fn load_flow(path: &Path) -> Result<FittedFlow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = FlowDocument::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Parse {
            path: path.to_path_buf(),
            line: j.line(),
            msg: j.to_string(),
        },
        other => other,
    })?;
    let flow = doc.to_flow()?;
    let scaler = match &doc.scaler {
        Some(s) => Scaler::from_document(s)?,
        None => Scaler::identity(flow.dim()),
    };
    FittedFlow::new(flow, scaler)
}

/// Reads only the metadata stored in a flow archive.
pub fn load_flow_metadata(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(FlowDocument::from_json(&text)?.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AffineFlow, BaseDistribution, ConditionerSpec, Ordering};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn column_file(n: usize, extra: &str) -> String {
        let mut s = String::new();
        for i in 0..n {
            s.push_str(&format!("{} {}\n", i as f64 * 0.5, (i * i) as f64));
        }
        s.push_str(extra);
        s
    }

    #[test]
    fn meta_line_gives_labeled_pair() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0001 1 1 2 2 1\n0002 2 2 1 1 0.5\n");
        write(dir.path(), "pair0001.txt", &column_file(10, ""));
        write(dir.path(), "pair0002.txt", &column_file(12, ""));
        let loaded = load_pairs(dir.path(), &meta).unwrap();
        assert_eq!(loaded.pairs.len(), 2);
        let p = &loaded.pairs[0];
        assert_eq!(p.id, "0001");
        assert_eq!(p.truth, Some(Direction::Forward));
        assert_eq!(p.weight, Some(1.0));
        assert_eq!(p.len(), 10);
        assert_eq!(loaded.pairs[1].truth, Some(Direction::Backward));
        assert_eq!(loaded.pairs[1].weight, Some(0.5));
    }

    #[test]
    fn multivariate_pair_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0052 1 2 3 3 1\n0001 1 1 2 2 1\n");
        write(dir.path(), "pair0001.txt", &column_file(10, ""));
        let loaded = load_pairs(dir.path(), &meta).unwrap();
        assert_eq!(loaded.pairs.len(), 1);
        assert_eq!(loaded.skipped_multivariate, vec!["0052".to_string()]);
    }

    #[test]
    fn nan_row_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0003 1 1 2 2 1\n");
        write(
            dir.path(),
            "pair0003.txt",
            &column_file(10, "NaN 4\n1 inf\n"),
        );
        let loaded = load_pairs(dir.path(), &meta).unwrap();
        assert_eq!(loaded.pairs[0].dropped_rows, 2);
        assert_eq!(loaded.pairs[0].len(), 10);
    }

    #[test]
    fn pairs_are_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0009 1 1 2 2 1\n0002 1 1 2 2 1\n");
        write(dir.path(), "pair0009.txt", &column_file(9, ""));
        write(dir.path(), "pair0002.txt", &column_file(9, ""));
        let ids: Vec<_> = load_pairs(dir.path(), &meta)
            .unwrap()
            .pairs
            .into_iter()
            .map(|p| p.id)
            .collect();
        assert_eq!(ids, vec!["0002", "0009"]);
    }

    #[test]
    fn short_pair_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0004 1 1 2 2 1\n");
        write(dir.path(), "pair0004.txt", &column_file(5, ""));
        let loaded = load_pairs(dir.path(), &meta).unwrap();
        assert!(loaded.pairs.is_empty());
        assert_eq!(loaded.skipped_unusable.len(), 1);
    }

    #[test]
    fn missing_meta_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_pairs(dir.path(), &dir.path().join("nope.txt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn malformed_meta_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "meta.txt", "0001 1 1 2 2 1\n0002 1 x 2 2 1\n");
        match parse_meta(&meta).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_basic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "1,2\n3,4");
        let m = load_csv(&p, false).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 2));
        assert_eq!(m.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,b\n1,2\n3,4\n");
        let m = load_csv(&p, true).unwrap();
        assert_eq!(
            m.column_names().unwrap(),
            &["a".to_string(), "b".to_string()]
        );
        assert_eq!(m.n_rows(), 2);
    }

    #[test]
    fn csv_ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "1,2\n3,4\n5\n6,7\n");
        match load_csv(&p, false).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..400).map(|_| rng.random::<f64>() * 2e3 - 1e3).collect();
        let m = DataMatrix::from_flat(100, 4, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_csv(&m, &p).unwrap();
        let back = load_csv(&p, false).unwrap();
        let diff = m
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    fn sample_fitted() -> FittedFlow {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flow = AffineFlow::init(
            Ordering::new(vec![1, 0, 2]).unwrap(),
            2,
            ConditionerSpec::default(),
            BaseDistribution::Laplace,
            &mut rng,
        )
        .unwrap();
        let scaler = Scaler {
            mean: vec![0.1, -2.0, 3.0],
            std: vec![1.5, 0.2, 7.0],
        };
        FittedFlow::new(flow, scaler).unwrap()
    }

    #[test]
    fn flow_roundtrip_is_exact() {
        let f = sample_fitted();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.json");
        save_flow(&f, &p, Some(serde_json::json!({"seed": 9}))).unwrap();
        let g = load_flow(&p).unwrap();
        assert_eq!(f, g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert_eq!(
                f.log_prob(&x).unwrap().to_bits(),
                g.log_prob(&x).unwrap().to_bits()
            );
        }
        assert_eq!(load_flow_metadata(&p).unwrap()["seed"], 9);
    }

    #[test]
    fn truncated_flow_is_parse_error() {
        let f = sample_fitted();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.json");
        save_flow(&f, &p, None).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_flow(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_version_flow() {
        let f = sample_fitted();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.json");
        save_flow(&f, &p, None).unwrap();
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("causal-flow/1", "causal-flow/9");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_flow(&p),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
