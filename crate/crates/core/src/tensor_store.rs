//! Checkpoint, covariance and task-vector containers.
//!
//! Files use the safetensors layout: an 8-byte little-endian header length,
//! a JSON header mapping tensor names to `{dtype, shape, data_offsets}`, then
//! the raw little-endian payload. Writers emit tensors in lexicographic order
//! and pad the header with spaces to an 8-byte boundary, so the same object
//! always serializes to the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};

const METADATA_KEY: &str = "__metadata__";
const KIND_KEY: &str = "kind";
const LINEAR_KEY: &str = "linear_layers";
const TASK_KEY: &str = "task_id";
const PROVENANCE_KEY: &str = "provenance";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One named tensor: shape plus a row-major scalar buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} scalars, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorRecord { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    /// Zero-dimensional F64 tensor.
    pub fn scalar(v: f64) -> Self {
        TensorRecord {
            shape: vec![],
            data: TensorData::F64(vec![v]),
        }
    }

    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Self {
        let shape = vec![m.rows(), m.cols()];
        let data = match dtype {
            Dtype::F64 => TensorData::F64(m.as_slice().to_vec()),
            Dtype::F32 => TensorData::F32(m.as_slice().iter().map(|&v| v as f32).collect()),
        };
        TensorRecord { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Same shape and dtype, new values (rounded to f32 when needed).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let data = match self.dtype() {
            Dtype::F64 => TensorData::F64(values),
            Dtype::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        Self::new(self.shape.clone(), data)
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if !self.is_matrix() {
            return Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.to_f64_vec())
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.to_f64_vec()[0])
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }
}

/// Raw container contents: tensors plus the string metadata map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

// Header object kept as an ordered list so repeated keys can be reported.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name == METADATA_KEY {
                return Err(Error::InvariantViolation(format!("invalid tensor name {name:?}")));
            }
            let end = offset + t.byte_len();
            header.insert(
                name.clone(),
                json!({"dtype": t.dtype().tag(), "shape": t.shape, "data_offsets": [offset, end]}),
            );
            offset = end;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), json!(self.metadata));
        }
        let mut hbytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        while hbytes.len() % 8 != 0 {
            hbytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + hbytes.len() + offset);
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for t in self.tensors.values() {
            t.write_bytes(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader("file shorter than length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if hlen > (bytes.len() - 8) as u64 {
            return Err(Error::MalformedHeader(format!(
                "header length {} exceeds file size {}",
                hlen,
                bytes.len()
            )));
        }
        let hlen = hlen as usize;
        let raw: RawHeader = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let payload = &bytes[8 + hlen..];

        let mut seen = BTreeSet::new();
        let mut metadata = BTreeMap::new();
        let mut entries = Vec::new();
        for (name, value) in raw.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| Error::MalformedHeader(format!("metadata: {e}")))?;
                continue;
            }
            if name.is_empty() {
                return Err(Error::MalformedHeader("empty tensor name".into()));
            }
            let e: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("{name}: {e}")))?;
            let dtype = Dtype::parse(&e.dtype)
                .ok_or_else(|| Error::MalformedHeader(format!("{name}: unsupported dtype {}", e.dtype)))?;
            entries.push((name, dtype, e.shape, e.data_offsets));
        }

        entries.sort_by_key(|e| (e.3[0], e.3[1]));
        let mut cursor = 0usize;
        let mut tensors = BTreeMap::new();
        for (name, dtype, shape, [begin, end]) in entries {
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::ShapeMismatch(format!("{name}: shape overflows")))?;
            if begin != cursor || end < begin || end - begin != count * dtype.size() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: offsets [{begin}, {end}) disagree with shape {shape:?} ({dtype:?})"
                )));
            }
            if end > payload.len() {
                return Err(Error::ShapeMismatch(format!("{name}: offsets run past the payload")));
            }
            let raw = &payload[begin..end];
            let data = match dtype {
                Dtype::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.insert(name, TensorRecord { shape, data });
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(Error::ShapeMismatch(format!(
                "payload is {} bytes but tensors cover {}",
                payload.len(),
                cursor
            )));
        }
        Ok(Container { tensors, metadata })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Weights of one model plus the list of mergeable 2-D layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub linear_layers: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in &self.linear_layers {
            if !seen.insert(name) {
                return Err(Error::InvariantViolation(format!("linear layer {name} listed twice")));
            }
            match self.tensors.get(name) {
                None => {
                    return Err(Error::InvariantViolation(format!(
                        "linear layer {name} has no tensor"
                    )))
                }
                Some(t) if !t.is_matrix() => {
                    return Err(Error::InvariantViolation(format!(
                        "linear layer {name} has shape {:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::IncompatibleTopology(format!("missing tensor {name}")))?
            .to_matrix()
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut metadata = self.metadata.clone();
        metadata.insert(KIND_KEY.into(), "checkpoint".into());
        metadata.insert(LINEAR_KEY.into(), serde_json::to_string(&self.linear_layers).unwrap());
        Ok(Container {
            tensors: self.tensors.clone(),
            metadata,
        })
    }

    fn from_container(mut c: Container) -> Result<Self> {
        c.metadata.remove(KIND_KEY);
        let linear_layers = match c.metadata.remove(LINEAR_KEY) {
            Some(s) => serde_json::from_str(&s)
                .map_err(|e| Error::MalformedHeader(format!("linear_layers: {e}")))?,
            None => Vec::new(),
        };
        let ck = Checkpoint {
            tensors: c.tensors,
            linear_layers,
            metadata: c.metadata,
        };
        ck.validate()?;
        Ok(ck)
    }
}

/// One layer's accumulated input covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEntry {
    pub matrix: Matrix,
    pub sample_count: u64,
    pub diag_boost: f64,
}

/// Per-layer covariances bound to one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovarianceSet {
    pub task_id: String,
    pub entries: BTreeMap<String, CovarianceEntry>,
}

impl CovarianceSet {
    pub fn entry(&self, layer: &str) -> Result<&CovarianceEntry> {
        self.entries
            .get(layer)
            .ok_or_else(|| Error::MissingCovariance(format!("{layer} (task {})", self.task_id)))
    }

    /// Square, symmetric and PSD within tolerance (before the recorded boost).
    pub fn validate(&self) -> Result<()> {
        for (layer, e) in &self.entries {
            let c = &e.matrix;
            if !c.is_square() {
                return Err(Error::InvariantViolation(format!("{layer}: covariance is not square")));
            }
            if !c.is_finite() {
                return Err(Error::InvariantViolation(format!("{layer}: non-finite covariance")));
            }
            if !(e.diag_boost >= 0.0) {
                return Err(Error::InvariantViolation(format!("{layer}: negative diag_boost")));
            }
            let n = c.rows();
            for i in 0..n {
                for j in 0..i {
                    let (a, b) = (c[(i, j)], c[(j, i)]);
                    if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                        return Err(Error::InvariantViolation(format!(
                            "{layer}: asymmetric at ({i},{j})"
                        )));
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let raw = c.add_diag(-e.diag_boost);
            let tol = 1e-8 * raw.trace().abs() / n as f64;
            // λ_min ≥ −tol is checked by factoring with a 2·tol shift.
            let shift = (2.0 * tol).max(f64::MIN_POSITIVE);
            if Cholesky::factor(&raw.add_diag(shift)).is_err() {
                return Err(Error::InvariantViolation(format!(
                    "{layer}: covariance is not positive semidefinite"
                )));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut tensors = BTreeMap::new();
        for (layer, e) in &self.entries {
            tensors.insert(format!("{layer}.cov"), TensorRecord::from_matrix(&e.matrix, Dtype::F64));
            tensors.insert(format!("{layer}.count"), TensorRecord::scalar(e.sample_count as f64));
            tensors.insert(format!("{layer}.boost"), TensorRecord::scalar(e.diag_boost));
        }
        let mut metadata = BTreeMap::new();
        metadata.insert(KIND_KEY.into(), "covariance".into());
        metadata.insert(TASK_KEY.into(), self.task_id.clone());
        Ok(Container { tensors, metadata })
    }

    fn from_container(c: Container) -> Result<Self> {
        let task_id = c.metadata.get(TASK_KEY).cloned().unwrap_or_default();
        let mut entries = BTreeMap::new();
        for (name, t) in &c.tensors {
            let Some(layer) = name.strip_suffix(".cov") else {
                continue;
            };
            let get = |suffix: &str| {
                c.tensors
                    .get(&format!("{layer}.{suffix}"))
                    .ok_or_else(|| Error::MalformedHeader(format!("{layer}: missing .{suffix}")))
                    .and_then(|t| t.scalar_value())
            };
            let count = get("count")?;
            if !(count >= 0.0) || count.fract() != 0.0 {
                return Err(Error::MalformedHeader(format!("{layer}: bad sample count {count}")));
            }
            entries.insert(
                layer.to_string(),
                CovarianceEntry {
                    matrix: t.to_matrix()?,
                    sample_count: count as u64,
                    diag_boost: get("boost")?,
                },
            );
        }
        let set = CovarianceSet { task_id, entries };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskVectorKind {
    Plain,
    Dare,
    Pave,
}

impl TaskVectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskVectorKind::Plain => "plain",
            TaskVectorKind::Dare => "dare",
            TaskVectorKind::Pave => "pave",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(TaskVectorKind::Plain),
            "dare" => Some(TaskVectorKind::Dare),
            "pave" => Some(TaskVectorKind::Pave),
            _ => None,
        }
    }
}

/// Per-tensor deltas of one task against the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub task_id: String,
    pub kind: TaskVectorKind,
    pub layers: BTreeMap<String, TensorRecord>,
    /// Settings that produced the deltas (drop rate, ranks, decomposer).
    pub provenance: BTreeMap<String, String>,
}

impl TaskVectorSet {
    pub fn to_container(&self) -> Result<Container> {
        let tensors = self
            .layers
            .iter()
            .map(|(k, v)| (format!("{k}.delta"), v.clone()))
            .collect();
        let mut metadata = BTreeMap::new();
        metadata.insert(KIND_KEY.into(), format!("task-vectors/{}", self.kind.as_str()));
        metadata.insert(TASK_KEY.into(), self.task_id.clone());
        metadata.insert(PROVENANCE_KEY.into(), serde_json::to_string(&self.provenance).unwrap());
        Ok(Container { tensors, metadata })
    }

    fn from_container(c: Container, kind: TaskVectorKind) -> Result<Self> {
        let provenance = match c.metadata.get(PROVENANCE_KEY) {
            Some(s) => serde_json::from_str(s)
                .map_err(|e| Error::MalformedHeader(format!("provenance: {e}")))?,
            None => BTreeMap::new(),
        };
        let mut layers = BTreeMap::new();
        for (name, t) in c.tensors {
            let layer = name
                .strip_suffix(".delta")
                .ok_or_else(|| Error::MalformedHeader(format!("unexpected tensor {name}")))?;
            layers.insert(layer.to_string(), t);
        }
        Ok(TaskVectorSet {
            task_id: c.metadata.get(TASK_KEY).cloned().unwrap_or_default(),
            kind,
            layers,
            provenance,
        })
    }
}

/// Anything `read_container` can return.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Checkpoint(Checkpoint),
    Covariance(CovarianceSet),
    TaskVectors(TaskVectorSet),
}

impl Artifact {
    pub fn from_container(c: Container) -> Result<Self> {
        let kind = c.metadata.get(KIND_KEY).cloned().unwrap_or_else(|| "checkpoint".into());
        match kind.as_str() {
            "checkpoint" => Ok(Artifact::Checkpoint(Checkpoint::from_container(c)?)),
            "covariance" => Ok(Artifact::Covariance(CovarianceSet::from_container(c)?)),
            k => match k.strip_prefix("task-vectors/").and_then(TaskVectorKind::parse) {
                Some(kind) => Ok(Artifact::TaskVectors(TaskVectorSet::from_container(c, kind)?)),
                None => Err(Error::MalformedHeader(format!("unknown container kind {k}"))),
            },
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        match self {
            Artifact::Checkpoint(c) => c.to_container(),
            Artifact::Covariance(c) => c.to_container(),
            Artifact::TaskVectors(t) => t.to_container(),
        }
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Artifact> {
    Artifact::from_container(Container::read(path)?)
}

pub fn write_container(obj: &Artifact, path: impl AsRef<Path>) -> Result<()> {
    obj.to_container()?.write(path)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match read_container(path.as_ref())? {
        Artifact::Checkpoint(c) => Ok(c),
        _ => Err(Error::MalformedHeader(format!(
            "{} is not a checkpoint",
            path.as_ref().display()
        ))),
    }
}

pub fn read_covariance(path: impl AsRef<Path>) -> Result<CovarianceSet> {
    match read_container(path.as_ref())? {
        Artifact::Covariance(c) => Ok(c),
        _ => Err(Error::MalformedHeader(format!(
            "{} is not a covariance set",
            path.as_ref().display()
        ))),
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ck.to_container()?.write(path)
}

pub fn write_covariance(cov: &CovarianceSet, path: impl AsRef<Path>) -> Result<()> {
    cov.to_container()?.write(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompatIssue {
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    MissingInA,
    MissingInB,
}

/// Layers that prevent two checkpoints from being merged. Empty means compatible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatReport {
    pub issues: Vec<(String, CompatIssue)>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .issues
            .iter()
            .map(|(name, issue)| match issue {
                CompatIssue::ShapeMismatch { a, b } => format!("{name}: shape {a:?} vs {b:?}"),
                CompatIssue::MissingInA => format!("{name}: missing in a"),
                CompatIssue::MissingInB => format!("{name}: missing in b"),
            })
            .collect();
        f.write_str(&parts.join(", "))
    }
}

pub fn check_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let shapes = |c: &Checkpoint| -> BTreeMap<String, Vec<usize>> {
        c.linear_layers
            .iter()
            .map(|n| {
                let s = c.tensors.get(n).map(|t| t.shape().to_vec()).unwrap_or_default();
                (n.clone(), s)
            })
            .collect()
    };
    let (sa, sb) = (shapes(a), shapes(b));
    let names: BTreeSet<&String> = sa.keys().chain(sb.keys()).collect();
    let mut issues = Vec::new();
    for name in names {
        match (sa.get(name), sb.get(name)) {
            (Some(x), Some(y)) if x != y => issues.push((
                name.clone(),
                CompatIssue::ShapeMismatch {
                    a: x.clone(),
                    b: y.clone(),
                },
            )),
            (Some(_), None) => issues.push((name.clone(), CompatIssue::MissingInB)),
            (None, Some(_)) => issues.push((name.clone(), CompatIssue::MissingInA)),
            _ => {}
        }
    }
    CompatReport { issues }
}
