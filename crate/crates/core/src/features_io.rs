//! Feature ingestion and model persistence.
//!
//! Two input formats: a labeled CSV (`label,f0,...`) and a raw little-endian
//! f32 matrix with a text sidecar. Fitted models serialize into a single
//! versioned container: magic, version, a text header with lengths and the
//! config, f64 little-endian payload arrays in declared order, and a
//! trailing CRC32. Every numeric array round-trips bit-exactly.

use crate::config::{parse_config, FitConfig};
use crate::error::{Error, Result};
use crate::graph::{ClassGraph, SparseRows};
use crate::nystrom::ClassManifold;
use crate::proto::{ProjectedPrototypes, PrototypeBank};
use crate::spectral::{NormState, SpectralBasis};
use ndarray::{Array1, Array2, ArrayView2};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Labeled feature matrix: the universe everything is fitted over.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// N x D feature values.
    pub features: Array2<f64>,
    /// Class ids in 1..=class_count, one per row.
    pub labels: Vec<u32>,
    pub class_count: u32,
}

impl FeatureSet {
    /// Validate and wrap a feature matrix: finite values, 1-based labels
    /// covering every class id up to the maximum.
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::MalformedFile {
                path: String::new(),
                detail: "feature matrix must be non-empty".into(),
            });
        }
        if labels.len() != features.nrows() {
            return Err(Error::MalformedFile {
                path: String::new(),
                detail: format!("{} labels for {} rows", labels.len(), features.nrows()),
            });
        }
        for (row, r) in features.outer_iter().enumerate() {
            for (col, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row, col });
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0) {
            let _ = bad;
            return Err(Error::MalformedFile {
                path: String::new(),
                detail: "labels are 1-based; found 0".into(),
            });
        }
        let class_count = *labels.iter().max().expect("non-empty");
        let mut seen = vec![false; class_count as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        for c in 1..=class_count {
            if !seen[c as usize] {
                return Err(Error::EmptyClass { class: c });
            }
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        (1..=self.class_count).collect()
    }

    pub fn rows_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Copy the given rows into a dense matrix, preserving order.
    pub fn select_rows(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.features.row(r));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    RawF32,
}

/// Load a feature set from disk; row order is preserved from the file.
pub fn load_feature_set(path: &Path, format: FeatureFormat) -> Result<FeatureSet> {
    match format {
        FeatureFormat::Csv => load_csv(path),
        FeatureFormat::RawF32 => load_raw_f32(path),
    }
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn load_csv(path: &Path) -> Result<FeatureSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(path, "empty file"))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(malformed(path, "header must start with 'label,f0,...'"));
    }
    let dim = cols.len() - 1;
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(malformed(
                path,
                format!("header column {} must be f{i}", i + 1),
            ));
        }
    }

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(malformed(
                path,
                format!(
                    "line {}: {} fields, expected {}",
                    lineno + 1,
                    fields.len(),
                    dim + 1
                ),
            ));
        }
        let label: u32 = fields[0].trim().parse().map_err(|_| {
            malformed(
                path,
                format!("line {}: bad label '{}'", lineno + 1, fields[0]),
            )
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| malformed(path, format!("line {}: bad value '{f}'", lineno + 1)))?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(malformed(path, "no data rows"));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| malformed(path, e.to_string()))?;
    FeatureSet::new(features, labels)
}

/// Raw format: `<name>.f32` little-endian row-major values plus a
/// `<name>.meta` sidecar (`n = ...`, `d = ...`, `labels_path = ...`, one
/// 1-based label per line in the referenced file).
fn load_raw_f32(path: &Path) -> Result<FeatureSet> {
    let meta_path = path.with_extension("meta");
    let meta = std::fs::read_to_string(&meta_path)?;
    let mut n: Option<usize> = None;
    let mut d: Option<usize> = None;
    let mut labels_path: Option<String> = None;
    for (lineno, raw) in meta.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            malformed(
                &meta_path,
                format!("line {}: expected key = value", lineno + 1),
            )
        })?;
        match key.trim() {
            "n" => {
                n = Some(
                    value
                        .trim()
                        .parse()
                        .map_err(|_| malformed(&meta_path, "bad n"))?,
                )
            }
            "d" => {
                d = Some(
                    value
                        .trim()
                        .parse()
                        .map_err(|_| malformed(&meta_path, "bad d"))?,
                )
            }
            "labels_path" => labels_path = Some(value.trim().to_string()),
            other => return Err(malformed(&meta_path, format!("unknown key '{other}'"))),
        }
    }
    let n = n.ok_or_else(|| malformed(&meta_path, "missing n"))?;
    let d = d.ok_or_else(|| malformed(&meta_path, "missing d"))?;
    let labels_rel = labels_path.ok_or_else(|| malformed(&meta_path, "missing labels_path"))?;

    let bytes = std::fs::read(path)?;
    if bytes.len() != n * d * 4 {
        return Err(malformed(
            path,
            format!(
                "{} bytes, expected {} for {n}x{d} f32",
                bytes.len(),
                n * d * 4
            ),
        ));
    }
    let mut values = Vec::with_capacity(n * d);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let features = Array2::from_shape_vec((n, d), values).expect("sized above");

    let labels_file = meta_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(labels_rel);
    let labels_text = std::fs::read_to_string(&labels_file)?;
    let labels: Vec<u32> = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<u32>()
                .map_err(|_| malformed(&labels_file, format!("bad label '{l}'")))
        })
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(malformed(
            &labels_file,
            format!("{} labels for n = {n}", labels.len()),
        ));
    }
    FeatureSet::new(features, labels)
}

/// Write the standard feature CSV.
pub fn write_feature_csv(path: &Path, features: ArrayView2<f64>, labels: &[u32]) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for i in 0..features.ncols() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (row, label) in features.outer_iter().zip(labels) {
        out.push_str(&label.to_string());
        for v in row.iter() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the raw f32 pair (`.f32` payload, `.meta` sidecar, labels file).
pub fn write_feature_raw(path: &Path, features: ArrayView2<f64>, labels: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.len() * 4);
    for v in features.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let labels_name = format!(
        "{}.labels",
        path.file_stem().unwrap_or_default().to_string_lossy()
    );
    let labels_file = path.with_file_name(&labels_name);
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(&labels_file, text)?;
    let meta = format!(
        "n = {}\nd = {}\nlabels_path = {}\n",
        features.nrows(),
        features.ncols(),
        labels_name
    );
    std::fs::write(path.with_extension("meta"), meta)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"GPRO";
pub const MODEL_VERSION: u32 = 1;

/// Everything a fitted model needs to classify: per-class manifolds, the
/// projected prototype bank, and the config that produced them.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub manifolds: BTreeMap<u32, ClassManifold>,
    pub prototypes: PrototypeBank,
    pub config: FitConfig,
    pub format_version: u32,
}

impl ModelBundle {
    pub fn dim(&self) -> usize {
        self.manifolds.values().next().expect("nonempty").dim()
    }

    fn validate(&self) -> Result<()> {
        let manifold_ids: Vec<u32> = self.manifolds.keys().copied().collect();
        let proto_ids = self.prototypes.class_ids();
        if manifold_ids != proto_ids {
            return Err(Error::InvalidConfig(format!(
                "manifold classes {manifold_ids:?} != prototype classes {proto_ids:?}"
            )));
        }
        if !self.prototypes.is_projected() {
            return Err(Error::InvalidConfig(
                "bundle requires a projected prototype bank".into(),
            ));
        }
        Ok(())
    }
}

struct PayloadWriter {
    header: String,
    arrays: Vec<f64>,
}

impl PayloadWriter {
    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.header.push_str(&format!("{key} = {value}\n"));
    }
    fn push_slice(&mut self, values: &[f64]) {
        self.arrays.extend_from_slice(values);
    }
    fn push_iter(&mut self, values: impl IntoIterator<Item = f64>) {
        self.arrays.extend(values);
    }
}

/// Serialize a fitted bundle. The byte stream is fully determined by the
/// bundle contents, so identical fits produce identical files.
pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let mut w = PayloadWriter {
        header: String::new(),
        arrays: Vec::new(),
    };

    for line in bundle.config.to_text().lines() {
        w.header.push_str("config.");
        w.header.push_str(line);
        w.header.push('\n');
    }
    let classes: Vec<u32> = bundle.manifolds.keys().copied().collect();
    w.kv(
        "classes",
        classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    w.kv("proto.m", bundle.prototypes.m);
    w.kv("proto.dim", bundle.dim());

    for (&class, m) in &bundle.manifolds {
        let n = m.landmark_count();
        let prefix = format!("class.{class}");
        w.kv(&format!("{prefix}.n"), n);
        w.kv(&format!("{prefix}.dim"), m.dim());
        w.kv(&format!("{prefix}.pairs"), m.basis.eigenvalues.len());
        w.kv(&format!("{prefix}.l"), m.cfg.l);
        w.kv(&format!("{prefix}.nnz"), m.graph.affinity.nnz());
        w.kv(&format!("{prefix}.bridges"), m.graph.bridge_edges.len());
        w.kv(&format!("{prefix}.k_oos"), m.k_oos);
        w.kv(&format!("{prefix}.sigma_floor"), m.graph.sigma_floor);
        if let Some(from) = m.basis.clamped_from {
            w.kv(&format!("{prefix}.clamped_from"), from);
        }
        w.kv(
            &format!("{prefix}.norm"),
            match m.norm_state {
                NormState::None => "none",
                NormState::Energy { .. } => "energy",
                NormState::Zca { .. } => "zca",
            },
        );

        w.push_iter(m.graph.node_features.iter().copied());
        w.push_iter(m.graph.scales.iter().copied());
        w.push_iter(m.graph.degrees.iter().copied());
        for (i, row) in m.graph.affinity.rows.iter().enumerate() {
            for &(j, v) in row {
                w.arrays.push(i as f64);
                w.arrays.push(j as f64);
                w.arrays.push(v);
            }
        }
        for &(a, b) in &m.graph.bridge_edges {
            w.arrays.push(a as f64);
            w.arrays.push(b as f64);
        }
        w.push_iter(m.basis.eigenvalues.iter().copied());
        w.push_iter(m.basis.eigenvectors.iter().copied());
        w.push_iter(m.landmark_coords.iter().copied());
        match &m.norm_state {
            NormState::None => {}
            NormState::Energy { scale } => w.push_slice(scale),
            NormState::Zca { mean, transform } => {
                w.push_iter(mean.iter().copied());
                w.push_iter(transform.iter().copied());
            }
        }
    }

    for (&class, protos) in &bundle.prototypes.prototypes {
        let proj = &bundle.prototypes.projected[&class];
        w.kv(&format!("proto.{class}.coord_cols"), proj.coords.ncols());
        w.push_iter(protos.iter().copied());
        w.push_iter(proj.anchor_indices.iter().map(|&i| i as f64));
        w.push_iter(proj.anchored.iter().copied());
        w.push_iter(proj.coords.iter().copied());
        w.push_slice(&bundle.prototypes.head_weights[&class]);
    }

    let header_bytes = w.header.as_bytes();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + w.arrays.len() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(header_bytes);
    for v in &w.arrays {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&out);
    out.extend_from_slice(&hasher.finalize().to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct HeaderMap {
    entries: BTreeMap<String, String>,
}

impl HeaderMap {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::VersionMismatch(format!("header missing '{key}'")))
    }
    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::VersionMismatch(format!("header '{key}' not an integer")))
    }
    fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::VersionMismatch(format!("header '{key}' not a number")))
    }
}

struct ArrayReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ArrayReader<'a> {
    fn take(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count * 8;
        if self.pos + bytes > self.data.len() {
            return Err(Error::VersionMismatch("payload truncated".into()));
        }
        let out = self.data[self.pos..self.pos + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += bytes;
        Ok(out)
    }
}

/// Load a model container, verifying magic, version, and payload CRC.
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..4] != MODEL_MAGIC {
        return Err(Error::VersionMismatch(
            "not a model file (bad magic)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version == 0 || version > MODEL_VERSION {
        return Err(Error::VersionMismatch(format!(
            "unsupported version {version} (supported: 1..={MODEL_VERSION})"
        )));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..bytes.len() - 4]);
    let computed = hasher.finalize();
    if computed != stored {
        return Err(Error::ChecksumFailure { stored, computed });
    }

    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if header_end + 4 > bytes.len() {
        return Err(Error::VersionMismatch("header overruns file".into()));
    }
    let header_text = std::str::from_utf8(&bytes[16..header_end])
        .map_err(|_| Error::VersionMismatch("header is not UTF-8".into()))?;

    let mut entries = BTreeMap::new();
    let mut config_lines = String::new();
    for line in header_text.lines() {
        if let Some(rest) = line.strip_prefix("config.") {
            config_lines.push_str(rest);
            config_lines.push('\n');
        } else if let Some((k, v)) = line.split_once('=') {
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let header = HeaderMap { entries };
    let config = parse_config(&config_lines)?;

    let classes: Vec<u32> = header
        .get("classes")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::VersionMismatch("bad class list".into()))
        })
        .collect::<Result<_>>()?;
    let m_protos = header.usize("proto.m")?;

    let mut reader = ArrayReader {
        data: &bytes[header_end..bytes.len() - 4],
        pos: 0,
    };

    let mut manifolds = BTreeMap::new();
    for &class in &classes {
        let prefix = format!("class.{class}");
        let n = header.usize(&format!("{prefix}.n"))?;
        let dim = header.usize(&format!("{prefix}.dim"))?;
        let pairs = header.usize(&format!("{prefix}.pairs"))?;
        let l = header.usize(&format!("{prefix}.l"))?;
        let nnz = header.usize(&format!("{prefix}.nnz"))?;
        let bridges = header.usize(&format!("{prefix}.bridges"))?;
        let k_oos = header.usize(&format!("{prefix}.k_oos"))?;
        let sigma_floor = header.f64(&format!("{prefix}.sigma_floor"))?;
        let clamped_from = header
            .entries
            .get(&format!("{prefix}.clamped_from"))
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::VersionMismatch("bad clamped_from".into()))
            })
            .transpose()?;
        let norm_kind = header.get(&format!("{prefix}.norm"))?.to_string();

        let node_features = Array2::from_shape_vec((n, dim), reader.take(n * dim)?).expect("shape");
        let scales = Array1::from_vec(reader.take(n)?);
        let degrees = Array1::from_vec(reader.take(n)?);

        let triplets = reader.take(nnz * 3)?;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for t in triplets.chunks_exact(3) {
            let (i, j, v) = (t[0] as usize, t[1] as usize, t[2]);
            if i >= n || j >= n {
                return Err(Error::VersionMismatch("affinity index out of range".into()));
            }
            rows[i].push((j, v));
        }
        let affinity = SparseRows { n, rows };
        let transition = SparseRows {
            n,
            rows: affinity
                .rows
                .iter()
                .enumerate()
                .map(|(i, row)| row.iter().map(|&(j, v)| (j, v / degrees[i])).collect())
                .collect(),
        };

        let bridge_edges: Vec<(usize, usize)> = reader
            .take(bridges * 2)?
            .chunks_exact(2)
            .map(|p| (p[0] as usize, p[1] as usize))
            .collect();

        let eigenvalues = Array1::from_vec(reader.take(pairs)?);
        let eigenvectors =
            Array2::from_shape_vec((n, pairs), reader.take(n * pairs)?).expect("shape");
        let landmark_coords = Array2::from_shape_vec((n, l), reader.take(n * l)?).expect("shape");

        let norm_state = match norm_kind.as_str() {
            "none" => NormState::None,
            "energy" => NormState::Energy {
                scale: reader.take(l)?,
            },
            "zca" => NormState::Zca {
                mean: Array1::from_vec(reader.take(l)?),
                transform: Array2::from_shape_vec((l, l), reader.take(l * l)?).expect("shape"),
            },
            other => {
                return Err(Error::VersionMismatch(format!("unknown norm '{other}'")));
            }
        };

        let mut diff_cfg = config.diffusion.clone();
        diff_cfg.l = l;
        manifolds.insert(
            class,
            ClassManifold {
                graph: ClassGraph {
                    affinity,
                    degrees: degrees.clone(),
                    transition,
                    scales,
                    node_features,
                    sigma_floor,
                    bridge_edges,
                    cfg: config.graph.clone(),
                },
                basis: SpectralBasis {
                    eigenvalues,
                    eigenvectors,
                    l,
                    degrees,
                    clamped_from,
                },
                cfg: diff_cfg,
                norm_state,
                landmark_coords,
                k_oos,
            },
        );
    }

    let model_dim = header.usize("proto.dim")?;
    let mut prototypes = BTreeMap::new();
    let mut projected = BTreeMap::new();
    let mut head_weights = BTreeMap::new();
    for &class in &classes {
        let coord_cols = header.usize(&format!("proto.{class}.coord_cols"))?;
        let protos =
            Array2::from_shape_vec((m_protos, model_dim), reader.take(m_protos * model_dim)?)
                .expect("shape");
        let anchor_indices: Vec<usize> = reader
            .take(m_protos)?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let anchored =
            Array2::from_shape_vec((m_protos, model_dim), reader.take(m_protos * model_dim)?)
                .expect("shape");
        let coords =
            Array2::from_shape_vec((m_protos, coord_cols), reader.take(m_protos * coord_cols)?)
                .expect("shape");
        let weights = reader.take(m_protos)?;
        prototypes.insert(class, protos);
        projected.insert(
            class,
            ProjectedPrototypes {
                anchor_indices,
                anchored,
                coords,
            },
        );
        head_weights.insert(class, weights);
    }

    if reader.pos != reader.data.len() {
        return Err(Error::VersionMismatch("trailing payload bytes".into()));
    }

    let bundle = ModelBundle {
        manifolds,
        prototypes: PrototypeBank {
            prototypes,
            projected,
            head_weights,
            m: m_protos,
            epsilon_sim: config.prototypes.epsilon_sim,
        },
        config,
        format_version: version,
    };
    bundle.validate()?;
    Ok(bundle)
}
