//! File formats.
//!
//! JSON documents carry a top-level `"format"` field. CSV files start with a
//! metadata line `# format=<id> key=value ...`; loaders of generated files
//! require it and reject unknown format ids. Raw inputs from external tools
//! (frame tables, label files) may omit it. Floats are written with the
//! shortest decimal form that parses back to the same bits.
//!
//! The dictionary is a JSON metadata file plus a payload holding the `3L x K`
//! atom matrix row-major, either as CSV or as binary: the magic `FBDICT01`,
//! rows and cols as little-endian `u64`, then the entries as little-endian
//! `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{CvConfig, LabeledDataset};
use crate::coding::CodingConfig;
use crate::error::{Error, Result};
use crate::learn::{LearnConfig, TrainingLog};
use crate::model::{BasisDictionary, CoefficientSeries, ExpressionModel, GroupCode, LandmarkTopology, POSE_CHANNELS};
use crate::wcc::WccConfig;

pub const TOPOLOGY_FORMAT: &str = "facial-basis/topology/1";
pub const MODEL_FORMAT: &str = "facial-basis/expression-model/1";
pub const DICTIONARY_FORMAT: &str = "facial-basis/dictionary/1";
pub const COEFFICIENTS_FORMAT: &str = "facial-basis/coefficients/1";
pub const TRAINING_LOG_FORMAT: &str = "facial-basis/training-log/1";
pub const FRAMES_FORMAT: &str = "facial-basis/frames/1";
pub const CODES_FORMAT: &str = "facial-basis/codes/1";
pub const FEATURES_FORMAT: &str = "facial-basis/features/1";
pub const FEATURE_MAP_FORMAT: &str = "facial-basis/feature-map/1";
pub const WCC_META_FORMAT: &str = "facial-basis/wcc-meta/1";
pub const REPORT_FORMAT: &str = "facial-basis/evaluation/1";
pub const WEIGHT_SUMMARY_FORMAT: &str = "facial-basis/weight-summary/1";
pub const RANK_MANIFEST_FORMAT: &str = "facial-basis/rank-manifest/1";
pub const LABELS_FORMAT: &str = "facial-basis/labels/1";
pub const VALIDATION_FORMAT: &str = "facial-basis/validation/1";

const PAYLOAD_MAGIC: &[u8; 8] = b"FBDICT01";

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn check_format(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::FormatVersion {
            path: path.to_path_buf(),
            found: other.unwrap_or("<missing>").to_string(),
            expected: expected.to_string(),
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format: String,
    #[serde(flatten)]
    body: T,
}

pub fn read_json_versioned<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))?;
    check_format(path, value.get("format").and_then(|f| f.as_str()), expected)?;
    serde_json::from_value(value).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_json_versioned<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    write_json(
        path,
        &Versioned {
            format: format.to_string(),
            body,
        },
    )
}

pub fn read_topology(path: &Path) -> Result<LandmarkTopology> {
    read_json_versioned(path, TOPOLOGY_FORMAT)
}

pub fn write_topology(path: &Path, topology: &LandmarkTopology) -> Result<()> {
    write_json_versioned(path, TOPOLOGY_FORMAT, topology)
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    mean_landmarks: Vec<[f64; 3]>,
    /// 3L rows of M values.
    basis: Vec<Vec<f64>>,
}

pub fn read_expression_model(path: &Path) -> Result<ExpressionModel> {
    let doc: ModelDoc = read_json_versioned(path, MODEL_FORMAT)?;
    let l = doc.mean_landmarks.len();
    let mean = Array2::from_shape_fn((l, 3), |(r, c)| doc.mean_landmarks[r][c]);
    let m = doc.basis.first().map_or(0, Vec::len);
    if doc.basis.iter().any(|r| r.len() != m) {
        return Err(Error::parse(path, 0, "basis rows have differing lengths"));
    }
    let basis = Array2::from_shape_fn((doc.basis.len(), m), |(r, c)| doc.basis[r][c]);
    ExpressionModel::new(mean, basis)
}

pub fn write_expression_model(path: &Path, model: &ExpressionModel) -> Result<()> {
    let doc = ModelDoc {
        mean_landmarks: model.mean_landmarks().rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
        basis: model.basis().rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    write_json_versioned(path, MODEL_FORMAT, &doc)
}

// ---------------------------------------------------------------------------
// CSV tables

/// `key=value` pairs from the `#` metadata line.
pub type Metadata = BTreeMap<String, String>;

pub fn metadata_line(format: &str, extra: &[(&str, String)]) -> String {
    let mut line = format!("# format={format}");
    for (k, v) in extra {
        line.push_str(&format!(" {k}={v}"));
    }
    line.push('\n');
    line
}

fn split_metadata(text: &str) -> (Option<Metadata>, &str, u64) {
    if let Some(rest) = text.strip_prefix('#') {
        let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
        let meta = line
            .split_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        (Some(meta), body, 1)
    } else {
        (None, text, 0)
    }
}

/// A CSV file of a header plus string cells.
pub struct Table {
    pub path: PathBuf,
    pub meta: Option<Metadata>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    line_offset: u64,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let (meta, body, line_offset) = split_metadata(&text);
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::parse(path, line_offset + 1, e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect::<Vec<_>>();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(Error::parse(path, line_offset + 1, "missing header row"));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line()) + line_offset;
                Error::parse(path, line, e.to_string())
            })?;
            rows.push(record.iter().map(|s| s.trim().to_string()).collect());
        }
        Ok(Table {
            path: path.to_path_buf(),
            meta,
            header,
            rows,
            line_offset,
        })
    }

    pub fn require_format(&self, expected: &str) -> Result<&Metadata> {
        let found = self.meta.as_ref().and_then(|m| m.get("format")).map(String::as_str);
        check_format(&self.path, found, expected)?;
        Ok(self.meta.as_ref().unwrap())
    }

    /// Accepts a missing metadata line, rejects a different format id.
    pub fn allow_format(&self, expected: &str) -> Result<()> {
        match self.meta.as_ref().and_then(|m| m.get("format")) {
            Some(_) => self.require_format(expected).map(|_| ()),
            None => Ok(()),
        }
    }

    /// Line number of data row `r` (header is line 1 after metadata).
    pub fn line_of(&self, r: usize) -> u64 {
        self.line_offset + 2 + r as u64
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn number(&self, r: usize, c: usize) -> Result<f64> {
        let cell = &self.rows[r][c];
        cell.parse::<f64>().map_err(|_| {
            Error::parse(
                &self.path,
                self.line_of(r),
                format!("column {:?}: {cell:?} is not a number", self.header[c]),
            )
        })
    }

    /// Numeric matrix of the given columns.
    pub fn numbers(&self, cols: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.rows.len(), cols.len()));
        for r in 0..self.rows.len() {
            for (j, &c) in cols.iter().enumerate() {
                out[[r, j]] = self.number(r, c)?;
            }
        }
        Ok(out)
    }

    pub fn meta_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.meta.as_ref().and_then(|m| m.get(key)) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(&self.path, 1, format!("metadata {key}={v:?} is not a number"))),
        }
    }
}

pub fn write_csv(path: &Path, meta_line: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::from(meta_line);
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(header).expect("in-memory write");
    for row in rows {
        writer.write_record(row).expect("in-memory write");
    }
    let body = writer.into_inner().expect("in-memory flush");
    out.push_str(std::str::from_utf8(&body).expect("utf-8 csv"));
    write_bytes(path, out.as_bytes())
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<String>> {
    m.rows().into_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()).collect()
}

// ---------------------------------------------------------------------------
// Dictionary

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadEncoding {
    F64le,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadRef {
    pub encoding: PayloadEncoding,
    /// File name relative to the metadata file.
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryDoc {
    pub atom_count: usize,
    pub landmark_count: usize,
    pub lambda: f64,
    pub allocation: BTreeMap<GroupCode, usize>,
    pub atom_names: Vec<String>,
    pub atom_groups: Vec<GroupCode>,
    pub activation_rank: Option<Vec<usize>>,
    pub topology: LandmarkTopology,
    pub config_hash: String,
    pub learn_config: Option<LearnConfig>,
    /// Arguments of the command that produced the file, output path removed.
    #[serde(default)]
    pub command_line: Vec<String>,
    pub payload: PayloadRef,
}

/// How a dictionary file came to be.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub learn_config: Option<LearnConfig>,
    pub command_line: Vec<String>,
}

pub fn encode_payload_binary(atoms: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * atoms.len());
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.extend_from_slice(&(atoms.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(atoms.ncols() as u64).to_le_bytes());
    for v in atoms.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_payload_binary(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let err = |offset: usize, msg: &str| Error::parse(path, offset as u64, format!("byte {offset}: {msg}"));
    if bytes.len() < 24 || &bytes[..8] != PAYLOAD_MAGIC {
        return Err(err(0, "missing FBDICT01 header"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(24))
        .ok_or_else(|| err(8, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), &format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let values: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

/// Writes `<path>` (JSON) and its payload next to it, `<stem>.bin` or
/// `<stem>.csv`.
pub fn write_dictionary(
    path: &Path,
    dict: &BasisDictionary,
    provenance: &Provenance,
    encoding: PayloadEncoding,
) -> Result<()> {
    let config_hash = provenance.config_hash.as_str();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::input(format!("bad dictionary path {}", path.display())))?;
    let file = match encoding {
        PayloadEncoding::F64le => format!("{stem}.bin"),
        PayloadEncoding::Csv => format!("{stem}.csv"),
    };
    let payload_path = path.with_file_name(&file);
    match encoding {
        PayloadEncoding::F64le => write_bytes(&payload_path, &encode_payload_binary(dict.atoms()))?,
        PayloadEncoding::Csv => {
            let header: Vec<String> = dict.atom_names().to_vec();
            let meta = metadata_line(
                DICTIONARY_FORMAT,
                &[("payload", "atoms".into()), ("config_hash", config_hash.to_string())],
            );
            write_csv(&payload_path, &meta, &header, &matrix_rows(dict.atoms()))?;
        }
    }
    let doc = DictionaryDoc {
        atom_count: dict.atom_count(),
        landmark_count: dict.topology().landmark_count(),
        lambda: dict.lambda_used(),
        allocation: dict.allocation().into_iter().collect(),
        atom_names: dict.atom_names().to_vec(),
        atom_groups: dict.atom_groups().to_vec(),
        activation_rank: dict.activation_rank().map(<[usize]>::to_vec),
        topology: dict.topology().clone(),
        config_hash: config_hash.to_string(),
        learn_config: provenance.learn_config.clone(),
        command_line: provenance.command_line.clone(),
        payload: PayloadRef {
            encoding,
            file,
            rows: dict.atoms().nrows(),
            cols: dict.atoms().ncols(),
        },
    };
    write_json_versioned(path, DICTIONARY_FORMAT, &doc)
}

pub fn read_dictionary(path: &Path) -> Result<(BasisDictionary, DictionaryDoc)> {
    let doc: DictionaryDoc = read_json_versioned(path, DICTIONARY_FORMAT)?;
    let payload_path = path.with_file_name(&doc.payload.file);
    let atoms = match doc.payload.encoding {
        PayloadEncoding::F64le => {
            let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
            decode_payload_binary(&payload_path, &bytes)?
        }
        PayloadEncoding::Csv => {
            let t = Table::read(&payload_path)?;
            t.require_format(DICTIONARY_FORMAT)?;
            t.numbers(&(0..t.header.len()).collect::<Vec<_>>())?
        }
    };
    if atoms.dim() != (doc.payload.rows, doc.payload.cols) {
        return Err(Error::parse(
            &payload_path,
            0,
            format!("payload is {:?}, metadata says ({}, {})", atoms.dim(), doc.payload.rows, doc.payload.cols),
        ));
    }
    let dict = BasisDictionary::from_parts(
        doc.topology.clone(),
        atoms,
        doc.atom_groups.clone(),
        doc.atom_names.clone(),
        doc.activation_rank.clone(),
        doc.lambda,
    )?;
    Ok((dict, doc))
}

// ---------------------------------------------------------------------------
// Training log, coefficients, frames

pub fn write_training_log(path: &Path, log: &TrainingLog, config_hash: &str) -> Result<()> {
    let stop = serde_json::to_value(log.stop_reason).unwrap();
    let meta = metadata_line(
        TRAINING_LOG_FORMAT,
        &[
            ("stop_reason", stop.as_str().unwrap().to_string()),
            ("config_hash", config_hash.to_string()),
        ],
    );
    let header = ["iteration", "objective", "mean_sparsity", "max_atom_norm", "reinitialized_atoms"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = log
        .records
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt_f64(r.objective),
                fmt_f64(r.mean_sparsity),
                fmt_f64(r.max_atom_norm),
                r.reinitialized_atoms.to_string(),
            ]
        })
        .collect();
    write_csv(path, &meta, &header, &rows)
}

pub fn write_coefficients(path: &Path, series: &CoefficientSeries, config_hash: &str) -> Result<()> {
    let meta = metadata_line(
        COEFFICIENTS_FORMAT,
        &[
            ("frame_rate", fmt_f64(series.frame_rate())),
            ("config_hash", config_hash.to_string()),
        ],
    );
    write_csv(path, &meta, &series.channel_names(), &matrix_rows(&series.channels()))
}

pub fn read_coefficients(path: &Path) -> Result<CoefficientSeries> {
    let t = Table::read(path)?;
    t.require_format(COEFFICIENTS_FORMAT)?;
    let fps = t
        .meta_f64("frame_rate")?
        .ok_or_else(|| Error::parse(path, 1, "metadata lacks frame_rate"))?;
    let q = t.header.len();
    let has_pose = q >= 3 && t.header[q - 3..].iter().zip(POSE_CHANNELS).all(|(h, p)| h == p);
    let k = if has_pose { q - 3 } else { q };
    let all = t.numbers(&(0..q).collect::<Vec<_>>())?;
    if all.nrows() == 0 {
        return Err(Error::parse(path, 2, "no frames"));
    }
    let bu = all.slice(ndarray::s![.., ..k]).to_owned();
    let pose = has_pose.then(|| all.slice(ndarray::s![.., k..]).to_owned());
    CoefficientSeries::with_names(fps, bu, pose, t.header[..k].to_vec())
}

/// Per-frame input: `d_<i>` deformation columns or `eps_<m>` expression
/// coefficient columns, optionally `pitch`, `yaw`, `roll`.
pub struct FrameTable {
    pub table: Table,
    pub kind: FrameKind,
    pub values: Array2<f64>,
    pub pose: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Deformation,
    Expression,
}

fn indexed_columns(t: &Table, prefix: &str) -> Result<Vec<usize>> {
    let mut cols: Vec<(usize, usize)> = Vec::new();
    for (c, h) in t.header.iter().enumerate() {
        if let Some(idx) = h.strip_prefix(prefix) {
            let i = idx
                .parse::<usize>()
                .map_err(|_| Error::parse(&t.path, t.line_of(0) - 1, format!("bad column name {h:?}")))?;
            cols.push((i, c));
        }
    }
    cols.sort_unstable();
    if cols.iter().enumerate().any(|(n, &(i, _))| n != i) {
        return Err(Error::parse(
            &t.path,
            t.line_of(0) - 1,
            format!("{prefix}* columns must be numbered 0..n without gaps"),
        ));
    }
    Ok(cols.into_iter().map(|(_, c)| c).collect())
}

pub fn read_frames(path: &Path, require_pose: bool) -> Result<FrameTable> {
    let table = Table::read(path)?;
    table.allow_format(FRAMES_FORMAT)?;
    let d_cols = indexed_columns(&table, "d_")?;
    let e_cols = indexed_columns(&table, "eps_")?;
    let (kind, cols) = match (d_cols.is_empty(), e_cols.is_empty()) {
        (false, true) => (FrameKind::Deformation, d_cols),
        (true, false) => (FrameKind::Expression, e_cols),
        _ => {
            return Err(Error::parse(
                path,
                table.line_of(0) - 1,
                "expected either d_<i> or eps_<m> columns (not both)",
            ))
        }
    };
    let pose_cols: Vec<Option<usize>> = POSE_CHANNELS.iter().map(|p| table.column(p)).collect();
    let pose = if pose_cols.iter().all(Option::is_some) {
        Some(table.numbers(&pose_cols.iter().map(|c| c.unwrap()).collect::<Vec<_>>())?)
    } else if require_pose {
        return Err(Error::parse(
            path,
            table.line_of(0) - 1,
            "missing pitch/yaw/roll columns (pass --no-pose to encode without head rotation)",
        ));
    } else {
        None
    };
    let values = table.numbers(&cols)?;
    Ok(FrameTable {
        table,
        kind,
        values,
        pose,
    })
}

pub fn write_frames(path: &Path, kind: FrameKind, values: &Array2<f64>, pose: Option<&Array2<f64>>, extra: &[(&str, String)]) -> Result<()> {
    let prefix = match kind {
        FrameKind::Deformation => "d_",
        FrameKind::Expression => "eps_",
    };
    let mut header: Vec<String> = (0..values.ncols()).map(|i| format!("{prefix}{i}")).collect();
    let mut rows = matrix_rows(values);
    if let Some(p) = pose {
        header.extend(POSE_CHANNELS.iter().map(|s| s.to_string()));
        for (row, pr) in rows.iter_mut().zip(p.rows()) {
            row.extend(pr.iter().map(|&v| fmt_f64(v)));
        }
    }
    write_csv(path, &metadata_line(FRAMES_FORMAT, extra), &header, &rows)
}

pub fn write_codes(path: &Path, names: &[String], codes: &Array2<f64>, config_hash: &str) -> Result<()> {
    let meta = metadata_line(CODES_FORMAT, &[("config_hash", config_hash.to_string())]);
    write_csv(path, &meta, names, &matrix_rows(codes))
}

// ---------------------------------------------------------------------------
// Features and labels

pub fn feature_column_name(a: &str, b: &str) -> String {
    format!("{a}:{b}")
}

pub struct FeatureTable {
    pub video_ids: Vec<String>,
    pub features: Array2<f64>,
    pub channel_names: Vec<String>,
}

pub fn write_features(path: &Path, table: &FeatureTable, config_hash: &str) -> Result<()> {
    let q = table.channel_names.len();
    let meta = metadata_line(
        FEATURES_FORMAT,
        &[("channels", q.to_string()), ("config_hash", config_hash.to_string())],
    );
    let mut header = vec!["video_id".to_string()];
    for a in &table.channel_names {
        for b in &table.channel_names {
            header.push(feature_column_name(a, b));
        }
    }
    let rows: Vec<Vec<String>> = table
        .video_ids
        .iter()
        .zip(table.features.rows())
        .map(|(id, r)| std::iter::once(id.clone()).chain(r.iter().map(|&v| fmt_f64(v))).collect())
        .collect();
    write_csv(path, &meta, &header, &rows)
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let t = Table::read(path)?;
    t.require_format(FEATURES_FORMAT)?;
    if t.header.first().map(String::as_str) != Some("video_id") {
        return Err(Error::parse(path, 2, "first column must be video_id"));
    }
    let f = t.header.len() - 1;
    let q = (f as f64).sqrt().round() as usize;
    if q * q != f {
        return Err(Error::parse(path, 2, format!("{f} feature columns is not a square count")));
    }
    let channel_names: Vec<String> = t.header[1..=q]
        .iter()
        .map(|h| h.split_once(':').map_or(h.clone(), |(_, b)| b.to_string()))
        .collect();
    let features = t.numbers(&(1..=f).collect::<Vec<_>>())?;
    let video_ids = t.rows.iter().map(|r| r[0].clone()).collect();
    Ok(FeatureTable {
        video_ids,
        features,
        channel_names,
    })
}

pub fn write_feature_map(path: &Path, channel_names: &[String], config_hash: &str) -> Result<()> {
    let q = channel_names.len();
    let meta = metadata_line(FEATURE_MAP_FORMAT, &[("config_hash", config_hash.to_string())]);
    let header = ["index", "channel_i", "channel_j", "i", "j"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = (0..q * q)
        .map(|idx| {
            let (i, j) = (idx / q, idx % q);
            vec![
                idx.to_string(),
                channel_names[i].clone(),
                channel_names[j].clone(),
                i.to_string(),
                j.to_string(),
            ]
        })
        .collect();
    write_csv(path, &meta, &header, &rows)
}

/// `video_id,label` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let t = Table::read(path)?;
    t.allow_format(LABELS_FORMAT)?;
    let (id, label) = match (t.column("video_id"), t.column("label")) {
        (Some(i), Some(l)) => (i, l),
        _ => return Err(Error::parse(path, t.line_of(0) - 1, "label file needs video_id and label columns")),
    };
    Ok(t.rows.iter().map(|r| (r[id].clone(), r[label].clone())).collect())
}

pub fn write_labels(path: &Path, labels: &[(String, String)]) -> Result<()> {
    let header = vec!["video_id".to_string(), "label".to_string()];
    let rows: Vec<Vec<String>> = labels.iter().map(|(a, b)| vec![a.clone(), b.clone()]).collect();
    write_csv(path, &metadata_line(LABELS_FORMAT, &[]), &header, &rows)
}

/// Joins features with labels by video id; every id must appear in both.
pub fn join_labels(features: &FeatureTable, labels: &[(String, String)]) -> Result<LabeledDataset> {
    let label_map: BTreeMap<&str, &str> = labels.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let feature_ids: std::collections::BTreeSet<&str> = features.video_ids.iter().map(String::as_str).collect();
    let missing_labels: Vec<&str> = features
        .video_ids
        .iter()
        .map(String::as_str)
        .filter(|id| !label_map.contains_key(id))
        .collect();
    let unknown: Vec<&str> = labels
        .iter()
        .map(|(a, _)| a.as_str())
        .filter(|id| !feature_ids.contains(id))
        .collect();
    if !missing_labels.is_empty() || !unknown.is_empty() {
        return Err(Error::input(format!(
            "unmatched video ids: without label {missing_labels:?}; labels for unknown videos {unknown:?}"
        )));
    }
    let y: Vec<String> = features.video_ids.iter().map(|id| label_map[id.as_str()].to_string()).collect();
    LabeledDataset::new(features.features.clone(), &y, features.video_ids.clone())
}

// ---------------------------------------------------------------------------
// Pipeline configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub subsample_count: usize,
    pub subsample_fraction: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            subsample_count: 100,
            subsample_fraction: 0.9,
        }
    }
}

/// Everything a pipeline run can be configured with, loadable from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub topology: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub learn: LearnConfig,
    pub coding: CodingConfig,
    pub wcc: WccConfig,
    pub cv: CvConfig,
    pub classify: ClassifyConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
            Error::parse(path, line, e.message().to_string())
        })
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.topology.iter().chain(self.model.iter()) {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
            }
        }
        Ok(())
    }
}
