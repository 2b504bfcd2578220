//! Domain types and the on-disk dataset, alignment and probe formats.
//!
//! A dataset directory holds `manifest.json` plus raw `f32` payloads
//! (little-endian, row-major, no header). Shapes live only in the manifest.
//!
//! ```text
//! manifest.json   {"version":1,"dim":D,"n":N,"samples":[...],"files":{...}}
//! images.f32      N x D
//! texts.f32       N x D
//! texts_neg.f32   N x D, optional; row i embeds the permuted caption i
//! ```
//!
//! Embeddings are kept exactly as the encoder emitted them. Consumers decide
//! whether to normalize.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const IMAGE_FILE: &str = "images.f32";
pub const TEXT_FILE: &str = "texts.f32";
pub const TEXT_NEG_FILE: &str = "texts_neg.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Usage(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Adjective,
    Other,
}

/// `(token, tag)`; serialized as a two-element JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTag(pub String, pub PosTag);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub attr: String,
    pub obj: String,
}

impl Slot {
    pub fn new(attr: impl Into<String>, obj: impl Into<String>) -> Self {
        Self {
            attr: attr.into(),
            obj: obj.into(),
        }
    }
}

/// A caption of the form `[prefix] a1 o1 and a2 o2 and ...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredCaption {
    pub prefix: String,
    pub slots: Vec<Slot>,
}

impl StructuredCaption {
    pub fn new(prefix: impl Into<String>, slots: Vec<Slot>) -> Self {
        Self {
            prefix: prefix.into(),
            slots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::Data("structured caption has no slots".into()));
        }
        if self
            .slots
            .iter()
            .any(|s| s.attr.is_empty() || s.obj.is_empty())
        {
            return Err(Error::Data("empty attribute or object in slot".into()));
        }
        Ok(())
    }

    pub fn combo_id(&self) -> String {
        combo_id(&self.slots)
    }
}

/// Canonical order-insensitive key: sorted `attr:obj` tokens joined by `|`.
pub fn combo_id(slots: &[Slot]) -> String {
    let mut toks: Vec<String> = slots
        .iter()
        .map(|s| format!("{}:{}", s.attr, s.obj))
        .collect();
    toks.sort();
    toks.join("|")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(rename = "caption")]
    pub caption_text: String,
    pub structured: Option<StructuredCaption>,
    #[serde(default)]
    pub token_tags: Option<Vec<TokenTag>>,
    pub combo_id: String,
    pub split: Split,
}

/// Dense `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl StoredMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Rounds each entry to the nearest `f32`.
    pub fn from_dense(m: &DenseMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f32>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row of length {} in matrix with {cols} columns",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape already validated")
    }

    /// Selected rows widened to `f64`.
    pub fn dense_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend(self.row(i).iter().map(|&v| v as f64));
        }
        DenseMatrix::from_vec(idx.len(), self.cols, data).expect("row width is cols")
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| p / self.cols.max(1))
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_le_bytes()).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = (rows * cols * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::PayloadSize {
                file: path.display().to_string(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, cols, data)
    }
}

/// Embeddings of permuted captions, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    /// Row i embeds `permute(caption_i)`; rows with `valid[i] == false` are
    /// placeholders and must not be read.
    pub embeddings: StoredMatrix,
    pub valid: Vec<bool>,
}

/// Paired image/text embeddings plus caption metadata. Immutable once built
/// except for split relabelling.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    samples: Vec<SampleRecord>,
    image: StoredMatrix,
    text: StoredMatrix,
    negatives: Option<NegativeSet>,
    source: Option<String>,
    oracle: Option<serde_json::Value>,
}

impl EmbeddingDataset {
    pub fn new(
        samples: Vec<SampleRecord>,
        image: StoredMatrix,
        text: StoredMatrix,
        negatives: Option<NegativeSet>,
    ) -> Result<Self> {
        let ds = Self {
            dim: image.cols(),
            samples,
            image,
            text,
            negatives,
            source: None,
            oracle: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn with_oracle(mut self, oracle: serde_json::Value) -> Self {
        self.oracle = Some(oracle);
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        for (name, m) in [("image", &self.image), ("text", &self.text)] {
            if m.rows() != n || m.cols() != self.dim {
                return Err(Error::Shape(format!(
                    "{name} embeddings are {}x{}, expected {n}x{}",
                    m.rows(),
                    m.cols(),
                    self.dim
                )));
            }
            if let Some(r) = m.first_non_finite() {
                return Err(Error::Data(format!("non-finite {name} embedding in row {r}")));
            }
        }
        if let Some(neg) = &self.negatives {
            let m = &neg.embeddings;
            if m.rows() != n || m.cols() != self.dim || neg.valid.len() != n {
                return Err(Error::Shape(format!(
                    "negative embeddings are {}x{} with {} flags, expected {n}x{}",
                    m.rows(),
                    m.cols(),
                    neg.valid.len(),
                    self.dim
                )));
            }
            if let Some(r) = (0..n).find(|&i| neg.valid[i] && m.row(i).iter().any(|v| !v.is_finite())) {
                return Err(Error::Data(format!("non-finite negative embedding in row {r}")));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id '{}'", s.id)));
            }
            if let Some(c) = &s.structured {
                c.validate()?;
                if c.combo_id() != s.combo_id {
                    return Err(Error::Data(format!(
                        "sample '{}' combo_id does not match its slots",
                        s.id
                    )));
                }
            }
            if let Some(tags) = &s.token_tags {
                let joined = tags.iter().map(|t| t.0.as_str()).collect::<Vec<_>>().join(" ");
                if joined != s.caption_text {
                    return Err(Error::Data(format!(
                        "sample '{}' token tags do not reproduce its caption",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn image_embeddings(&self) -> &StoredMatrix {
        &self.image
    }

    pub fn text_embeddings(&self) -> &StoredMatrix {
        &self.text
    }

    pub fn embeddings(&self, modality: Modality) -> &StoredMatrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn negatives(&self) -> Option<&NegativeSet> {
        self.negatives.as_ref()
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn oracle(&self) -> Option<&serde_json::Value> {
        self.oracle.as_ref()
    }

    /// Indices of samples in `split`, or every index when `split` is `None`.
    pub fn indices(&self, split: Option<Split>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| split.is_none_or(|s| self.samples[i].split == s))
            .collect()
    }

    /// Indices in `split` that carry a usable negative.
    pub fn indices_with_negatives(&self, split: Option<Split>) -> Vec<usize> {
        match &self.negatives {
            None => Vec::new(),
            Some(neg) => self
                .indices(split)
                .into_iter()
                .filter(|&i| neg.valid[i])
                .collect(),
        }
    }

    pub fn set_splits(&mut self, splits: &[Split]) -> Result<()> {
        if splits.len() != self.samples.len() {
            return Err(Error::Shape(format!(
                "{} split labels for {} samples",
                splits.len(),
                self.samples.len()
            )));
        }
        for (s, &sp) in self.samples.iter_mut().zip(splits) {
            s.split = sp;
        }
        Ok(())
    }

    pub fn set_negatives(&mut self, negatives: Option<NegativeSet>) -> Result<()> {
        let old = std::mem::replace(&mut self.negatives, negatives);
        if let Err(e) = self.validate() {
            self.negatives = old;
            return Err(e);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFiles {
    image: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_neg: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dim: usize,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    samples: Vec<SampleRecord>,
    files: ManifestFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neg_valid: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<serde_json::Value>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads a dataset. `path` may be the manifest itself or its directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let m: Manifest = read_json(&manifest_path)?;
    check_version(&manifest_path, m.version)?;
    if m.n != m.samples.len() {
        return Err(Error::Data(format!(
            "manifest declares n={} but lists {} samples",
            m.n,
            m.samples.len()
        )));
    }
    if m.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let image = StoredMatrix::read(&dir.join(&m.files.image), m.n, m.dim)?;
    let text = StoredMatrix::read(&dir.join(&m.files.text), m.n, m.dim)?;
    let negatives = match (&m.files.text_neg, m.neg_valid) {
        (Some(f), valid) => Some(NegativeSet {
            embeddings: StoredMatrix::read(&dir.join(f), m.n, m.dim)?,
            valid: valid.unwrap_or_else(|| vec![true; m.n]),
        }),
        (None, Some(_)) => {
            return Err(Error::Data("neg_valid given without a text_neg file".into()))
        }
        (None, None) => None,
    };
    let mut ds = EmbeddingDataset::new(m.samples, image, text, negatives)?;
    ds.source = m.source;
    ds.oracle = m.oracle;
    Ok(ds)
}

/// Writes `manifest.json` and payloads into `dir`, creating it if needed.
/// Returns the manifest path.
pub fn save_dataset(ds: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.image.write(&dir.join(IMAGE_FILE))?;
    ds.text.write(&dir.join(TEXT_FILE))?;
    if let Some(neg) = &ds.negatives {
        neg.embeddings.write(&dir.join(TEXT_NEG_FILE))?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dim: ds.dim,
        n: ds.len(),
        source: ds.source.clone(),
        samples: ds.samples.clone(),
        files: ManifestFiles {
            image: IMAGE_FILE.into(),
            text: TEXT_FILE.into(),
            text_neg: ds.negatives.as_ref().map(|_| TEXT_NEG_FILE.into()),
        },
        neg_valid: ds.negatives.as_ref().map(|n| n.valid.clone()),
        oracle: ds.oracle.clone(),
    };
    let path = dir.join(MANIFEST_NAME);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// The learned D x D text transform and log-scale temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    matrix: StoredMatrix,
    pub log_temperature: f64,
}

impl AlignmentModel {
    /// Identity transform with multiplier `exp(0) = 1`.
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: StoredMatrix::from_dense(&DenseMatrix::identity(dim)),
            log_temperature: 0.0,
        }
    }

    pub fn new(matrix: StoredMatrix, log_temperature: f64) -> Result<Self> {
        if matrix.rows() != matrix.cols() || matrix.rows() == 0 {
            return Err(Error::Shape(format!(
                "alignment matrix must be square and non-empty, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if matrix.first_non_finite().is_some() || !log_temperature.is_finite() {
            return Err(Error::Numerical("non-finite alignment parameters".into()));
        }
        Ok(Self {
            matrix,
            log_temperature,
        })
    }

    /// Rounds a working-precision matrix into a stored model.
    pub fn from_dense(matrix: &DenseMatrix, log_temperature: f64) -> Result<Self> {
        Self::new(StoredMatrix::from_dense(matrix), log_temperature)
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &StoredMatrix {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| self.matrix.row(i)[j] == if i == j { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentHeader {
    version: u32,
    dim: usize,
    log_temperature: f64,
    file: String,
}

fn sibling_payload(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Usage(format!("bad output path {}", path.display())))?;
    let name = format!("{stem}.f32");
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok((dir.join(&name), name))
}

/// Writes `path` (JSON header) and a sibling `<stem>.f32` payload.
pub fn save_alignment(model: &AlignmentModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (payload, name) = sibling_payload(path)?;
    model.matrix.write(&payload)?;
    write_json(
        path,
        &AlignmentHeader {
            version: FORMAT_VERSION,
            dim: model.dim(),
            log_temperature: model.log_temperature,
            file: name,
        },
    )
}

pub fn load_alignment(path: impl AsRef<Path>) -> Result<AlignmentModel> {
    let path = path.as_ref();
    let h: AlignmentHeader = read_json(path)?;
    check_version(path, h.version)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let matrix = StoredMatrix::read(&dir.join(&h.file), h.dim, h.dim)?;
    AlignmentModel::new(matrix, h.log_temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// One attribute per sample, argmax decision.
    Softmax,
    /// One sigmoid per attribute, thresholded at 0.5, exact-set scoring.
    Multilabel,
}

/// Per-object attribute classifier over frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub object: String,
    pub mode: ProbeMode,
    pub classes: Vec<String>,
    pub weights: StoredMatrix,
    pub bias: Vec<f32>,
}

impl LinearProbe {
    pub fn new(
        object: impl Into<String>,
        mode: ProbeMode,
        classes: Vec<String>,
        weights: StoredMatrix,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if classes.is_empty() || weights.rows() != classes.len() || bias.len() != classes.len() {
            return Err(Error::Shape(format!(
                "{} classes, {} weight rows, {} biases",
                classes.len(),
                weights.rows(),
                bias.len()
            )));
        }
        Ok(Self {
            object: object.into(),
            mode,
            classes,
            weights,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Raw class scores for one embedding.
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|c| {
                self.weights
                    .row(c)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum::<f64>()
                    + self.bias[c] as f64
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    version: u32,
    object: String,
    mode: ProbeMode,
    dim: usize,
    classes: Vec<String>,
    bias: Vec<f32>,
    file: String,
}

/// Writes `path` (JSON header with classes and bias) and `<stem>.f32` weights.
pub fn save_probe(probe: &LinearProbe, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (payload, name) = sibling_payload(path)?;
    probe.weights.write(&payload)?;
    write_json(
        path,
        &ProbeHeader {
            version: FORMAT_VERSION,
            object: probe.object.clone(),
            mode: probe.mode,
            dim: probe.dim(),
            classes: probe.classes.clone(),
            bias: probe.bias.clone(),
            file: name,
        },
    )
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<LinearProbe> {
    let path = path.as_ref();
    let h: ProbeHeader = read_json(path)?;
    check_version(path, h.version)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let weights = StoredMatrix::read(&dir.join(&h.file), h.classes.len(), h.dim)?;
    LinearProbe::new(h.object, h.mode, h.classes, weights, h.bias)
}
