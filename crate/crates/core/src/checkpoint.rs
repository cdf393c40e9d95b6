//! Named-tensor checkpoint container with copy-on-write bit-flip views.
//!
//! Layout on disk is `[u64 LE header length][UTF-8 JSON header][raw data]`,
//! where every header entry is
//! `name -> {"dtype": "F16", "shape": [..], "data_offsets": [begin, end]}`
//! and offsets are relative to the start of the data region. This is the
//! same layout as `.safetensors` files, so real checkpoints parse too.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::half16::{flip_bit, BitPosition, Half16};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("range error: {0}")]
    RangeError(String),
    #[error("tensor `{name}` has dtype {dtype}, expected F16")]
    DtypeError { name: String, dtype: Dtype },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("index {index} out of bounds for tensor `{name}` with {len} elements")]
    IndexError { name: String, index: usize, len: usize },
    #[error("unknown target: {0}")]
    UnknownTarget(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Bool,
    U8,
    I8,
    U16,
    I16,
    F16,
    BF16,
    U32,
    I32,
    F32,
    U64,
    I64,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Bool | Dtype::U8 | Dtype::I8 => 1,
            Dtype::U16 | Dtype::I16 | Dtype::F16 | Dtype::BF16 => 2,
            Dtype::U32 | Dtype::I32 | Dtype::F32 => 4,
            Dtype::U64 | Dtype::I64 | Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I8 => "I8",
            Dtype::U16 => "U16",
            Dtype::I16 => "I16",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::U32 => "U32",
            Dtype::I32 => "I32",
            Dtype::F32 => "F32",
            Dtype::U64 => "U64",
            Dtype::I64 => "I64",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Option<Dtype> {
        Some(match s {
            "BOOL" => Dtype::Bool,
            "U8" => Dtype::U8,
            "I8" => Dtype::I8,
            "U16" => Dtype::U16,
            "I16" => Dtype::I16,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "U32" => Dtype::U32,
            "I32" => Dtype::I32,
            "F32" => Dtype::F32,
            "U64" => Dtype::U64,
            "I64" => Dtype::I64,
            "F64" => Dtype::F64,
            _ => return None,
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte range `[begin, end)` into the data region.
    pub begin: usize,
    pub end: usize,
}

impl TensorEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointHeader {
    entries: Vec<TensorEntry>,
    index: HashMap<String, usize>,
    metadata: Option<BTreeMap<String, String>>,
}

impl CheckpointHeader {
    /// Entries sorted by name.
    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    fn position(&self, name: &str) -> Result<usize, CheckpointError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))
    }

    fn from_json(text: &[u8], data_len: usize) -> Result<Self, CheckpointError> {
        let malformed = |m: String| CheckpointError::MalformedHeader(m);
        let value: Value =
            serde_json::from_slice(text).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(malformed("header is not a JSON object".into()));
        };

        let mut metadata = None;
        let mut entries = Vec::with_capacity(map.len());
        for (name, spec) in map {
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> = serde_json::from_value(spec)
                    .map_err(|e| malformed(format!("{METADATA_KEY}: {e}")))?;
                metadata = Some(meta);
                continue;
            }
            entries.push(parse_entry(&name, &spec)?);
        }

        for e in &entries {
            let want = e.element_count() * e.dtype.size();
            if e.end - e.begin != want {
                return Err(CheckpointError::RangeError(format!(
                    "tensor `{}` spans {} bytes but shape {:?} of {} needs {want}",
                    e.name,
                    e.end - e.begin,
                    e.shape,
                    e.dtype
                )));
            }
            if e.end > data_len {
                return Err(CheckpointError::RangeError(format!(
                    "tensor `{}` ends at byte {} beyond data region of {data_len} bytes",
                    e.name, e.end
                )));
            }
        }
        check_disjoint(&entries)?;
        Self::from_entries(entries, metadata)
    }

    fn from_entries(
        mut entries: Vec<TensorEntry>,
        metadata: Option<BTreeMap<String, String>>,
    ) -> Result<Self, CheckpointError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(CheckpointError::DuplicateName(e.name.clone()));
            }
        }
        Ok(CheckpointHeader {
            entries,
            index,
            metadata,
        })
    }

    /// Canonical JSON text, keys sorted, padded with spaces to a multiple of 8.
    fn to_json(&self) -> Vec<u8> {
        let mut map = Map::new();
        if let Some(meta) = &self.metadata {
            let meta: Map<String, Value> = meta
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            map.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        for e in &self.entries {
            let mut spec = Map::new();
            spec.insert("dtype".into(), Value::String(e.dtype.as_str().into()));
            spec.insert(
                "shape".into(),
                Value::Array(e.shape.iter().map(|&d| Value::from(d)).collect()),
            );
            spec.insert(
                "data_offsets".into(),
                Value::Array(vec![Value::from(e.begin), Value::from(e.end)]),
            );
            map.insert(e.name.clone(), Value::Object(spec));
        }
        let mut text = serde_json::to_vec(&Value::Object(map)).expect("header serializes");
        while !text.len().is_multiple_of(8) {
            text.push(b' ');
        }
        text
    }
}

fn parse_entry(name: &str, spec: &Value) -> Result<TensorEntry, CheckpointError> {
    let malformed = |m: &str| CheckpointError::MalformedHeader(format!("tensor `{name}`: {m}"));
    let obj = spec.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `dtype`"))?;
    let dtype = Dtype::parse(dtype_str)
        .ok_or_else(|| malformed(&format!("unsupported dtype `{dtype_str}`")))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array field `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array field `data_offsets`"))?;
    let (begin, end) = match offsets.as_slice() {
        [b, e] => match (b.as_u64(), e.as_u64()) {
            (Some(b), Some(e)) => (b as usize, e as usize),
            _ => return Err(malformed("data_offsets must be non-negative integers")),
        },
        _ => return Err(malformed("data_offsets must have two elements")),
    };
    if end < begin {
        return Err(CheckpointError::RangeError(format!(
            "tensor `{name}` has reversed range [{begin}, {end})"
        )));
    }
    Ok(TensorEntry {
        name: name.to_string(),
        dtype,
        shape,
        begin,
        end,
    })
}

fn check_disjoint(entries: &[TensorEntry]) -> Result<(), CheckpointError> {
    let mut ranges: Vec<&TensorEntry> = entries.iter().filter(|e| e.end > e.begin).collect();
    ranges.sort_by_key(|e| (e.begin, e.end));
    for pair in ranges.windows(2) {
        if pair[1].begin < pair[0].end {
            return Err(CheckpointError::RangeError(format!(
                "tensors `{}` [{}, {}) and `{}` [{}, {}) overlap",
                pair[0].name, pair[0].begin, pair[0].end, pair[1].name, pair[1].begin, pair[1].end
            )));
        }
    }
    Ok(())
}

/// An immutable parsed checkpoint. Mutation goes through [`CheckpointView`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointStore {
    header: CheckpointHeader,
    header_bytes: Vec<u8>,
    data: Vec<u8>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<CheckpointStore, CheckpointError> {
    CheckpointStore::parse(bytes)
}

impl CheckpointStore {
    pub fn parse(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let Some(len_bytes) = bytes.get(..8) else {
            return Err(CheckpointError::MalformedHeader(format!(
                "stream of {} bytes is shorter than the 8-byte length prefix",
                bytes.len()
            )));
        };
        let header_len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(CheckpointError::MalformedHeader(format!(
                "header length {header_len} exceeds the {available} bytes that follow"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header_bytes = &bytes[8..header_end];
        std::str::from_utf8(header_bytes)
            .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let data = &bytes[header_end..];
        let header = CheckpointHeader::from_json(header_bytes, data.len())?;
        Ok(CheckpointStore {
            header,
            header_bytes: header_bytes.to_vec(),
            data: data.to_vec(),
        })
    }

    pub fn read_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Result<Self, CheckpointError>> {
        Ok(Self::parse(&std::fs::read(path)?))
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.header.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry, CheckpointError> {
        self.header
            .get(name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))
    }

    fn f16_entry(&self, name: &str) -> Result<(usize, &TensorEntry), CheckpointError> {
        let pos = self.header.position(name)?;
        let entry = &self.header.entries[pos];
        if entry.dtype != Dtype::F16 {
            return Err(CheckpointError::DtypeError {
                name: name.to_string(),
                dtype: entry.dtype,
            });
        }
        Ok((pos, entry))
    }

    #[inline]
    fn read_at(&self, entry: &TensorEntry, index: usize) -> Half16 {
        let off = entry.begin + 2 * index;
        Half16(u16::from_le_bytes([self.data[off], self.data[off + 1]]))
    }

    pub fn read(&self, name: &str, index: usize) -> Result<Half16, CheckpointError> {
        let (_, entry) = self.f16_entry(name)?;
        check_index(entry, index)?;
        Ok(self.read_at(entry, index))
    }

    /// All elements of an F16 tensor in row-major order.
    pub fn tensor_f16(&self, name: &str) -> Result<Vec<Half16>, CheckpointError> {
        let (_, entry) = self.f16_entry(name)?;
        Ok(self.data[entry.begin..entry.end]
            .chunks_exact(2)
            .map(|c| Half16(u16::from_le_bytes([c[0], c[1]])))
            .collect())
    }

    /// Serialized bytes. Headers that came from [`CheckpointStore::parse`] are
    /// written back verbatim.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.header_bytes.len() + self.data.len());
        out.extend_from_slice(&(self.header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.header_bytes);
        out.extend_from_slice(&self.data);
        out
    }

    /// Absolute offset, in the serialized stream, of the first byte of a
    /// tensor element.
    pub fn element_file_offset(&self, name: &str, index: usize) -> Result<usize, CheckpointError> {
        let (_, entry) = self.f16_entry(name)?;
        check_index(entry, index)?;
        Ok(8 + self.header_bytes.len() + entry.begin + 2 * index)
    }

    /// SHA-256 over the serialized stream, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.header_bytes.len() as u64).to_le_bytes());
        hasher.update(&self.header_bytes);
        hasher.update(&self.data);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn into_view(self) -> CheckpointView {
        CheckpointView::new(Arc::new(self))
    }
}

fn check_index(entry: &TensorEntry, index: usize) -> Result<(), CheckpointError> {
    let len = entry.element_count();
    if index >= len {
        return Err(CheckpointError::IndexError {
            name: entry.name.clone(),
            index,
            len,
        });
    }
    Ok(())
}

/// Assembles a [`CheckpointStore`] with tensors laid out in insertion order.
#[derive(Debug, Default)]
pub struct CheckpointBuilder {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
    metadata: Option<BTreeMap<String, String>>,
}

impl CheckpointBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata
            .get_or_insert_with(BTreeMap::new)
            .insert(key.into(), value.into());
        self
    }

    pub fn push_f16(
        self,
        name: impl Into<String>,
        shape: &[usize],
        values: &[Half16],
    ) -> Result<Self, CheckpointError> {
        let bytes: Vec<u8> = values.iter().flat_map(|h| h.0.to_le_bytes()).collect();
        self.push_raw(name, Dtype::F16, shape, &bytes)
    }

    pub fn push_raw(
        mut self,
        name: impl Into<String>,
        dtype: Dtype,
        shape: &[usize],
        bytes: &[u8],
    ) -> Result<Self, CheckpointError> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(CheckpointError::MalformedHeader(format!(
                "`{METADATA_KEY}` is reserved"
            )));
        }
        let want = shape.iter().product::<usize>() * dtype.size();
        if bytes.len() != want {
            return Err(CheckpointError::RangeError(format!(
                "tensor `{name}` given {} bytes, shape {shape:?} of {dtype} needs {want}",
                bytes.len()
            )));
        }
        let begin = self.data.len();
        self.data.extend_from_slice(bytes);
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape: shape.to_vec(),
            begin,
            end: self.data.len(),
        });
        Ok(self)
    }

    pub fn build(self) -> Result<CheckpointStore, CheckpointError> {
        let header = CheckpointHeader::from_entries(self.entries, self.metadata)?;
        let header_bytes = header.to_json();
        Ok(CheckpointStore {
            header,
            header_bytes,
            data: self.data,
        })
    }
}

/// Copy-on-write view: an immutable shared base plus a sparse overlay of
/// mutated F16 elements. The base is never written.
#[derive(Debug, Clone)]
pub struct CheckpointView {
    base: Arc<CheckpointStore>,
    /// (tensor position in header, flat index) -> current pattern. Entries
    /// equal to the base pattern are never stored.
    overlay: BTreeMap<(usize, usize), Half16>,
}

impl CheckpointView {
    pub fn new(base: Arc<CheckpointStore>) -> Self {
        CheckpointView {
            base,
            overlay: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &Arc<CheckpointStore> {
        &self.base
    }

    pub fn is_pristine(&self) -> bool {
        self.overlay.is_empty()
    }

    pub fn read(&self, name: &str, index: usize) -> Result<Half16, CheckpointError> {
        let (pos, entry) = self.base.f16_entry(name)?;
        check_index(entry, index)?;
        Ok(self.read_resolved(pos, entry, index))
    }

    fn read_resolved(&self, pos: usize, entry: &TensorEntry, index: usize) -> Half16 {
        self.overlay
            .get(&(pos, index))
            .copied()
            .unwrap_or_else(|| self.base.read_at(entry, index))
    }

    /// Replace one element with an arbitrary pattern.
    pub fn with_element(
        &self,
        name: &str,
        index: usize,
        value: Half16,
    ) -> Result<CheckpointView, CheckpointError> {
        let (pos, entry) = self.base.f16_entry(name)?;
        check_index(entry, index)?;
        let mut next = self.clone();
        if self.base.read_at(entry, index) == value {
            next.overlay.remove(&(pos, index));
        } else {
            next.overlay.insert((pos, index), value);
        }
        Ok(next)
    }

    pub fn flip_element(
        &self,
        name: &str,
        index: usize,
        bit: BitPosition,
    ) -> Result<CheckpointView, CheckpointError> {
        let current = self.read(name, index)?;
        self.with_element(name, index, flip_bit(current, bit))
    }

    /// All elements of an F16 tensor with the overlay applied.
    pub fn tensor_f16(&self, name: &str) -> Result<Vec<Half16>, CheckpointError> {
        let (pos, _) = self.base.f16_entry(name)?;
        let mut values = self.base.tensor_f16(name)?;
        for (&(_, index), &h) in self.overlay.range((pos, 0)..(pos + 1, 0)) {
            values[index] = h;
        }
        Ok(values)
    }

    /// Mutated elements as `(tensor name, flat index, pattern)`.
    pub fn overlay_entries(&self) -> impl Iterator<Item = (&str, usize, Half16)> {
        self.overlay.iter().map(|(&(pos, index), &h)| {
            (self.base.header.entries[pos].name.as_str(), index, h)
        })
    }

    /// Names of tensors with at least one overlay entry, in header order.
    pub fn dirty_tensors(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for &(pos, _) in self.overlay.keys() {
            let name = self.base.header.entries[pos].name.as_str();
            if names.last() != Some(&name) {
                names.push(name);
            }
        }
        names
    }

    pub fn materialize(&self) -> CheckpointStore {
        let mut store = CheckpointStore::clone(&self.base);
        for (&(pos, index), &h) in &self.overlay {
            let off = store.header.entries[pos].begin + 2 * index;
            store.data[off..off + 2].copy_from_slice(&h.0.to_le_bytes());
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.materialize().to_bytes()
    }
}

impl From<CheckpointStore> for CheckpointView {
    fn from(store: CheckpointStore) -> Self {
        store.into_view()
    }
}

pub fn flip_element(
    view: &CheckpointView,
    name: &str,
    index: usize,
    bit: BitPosition,
) -> Result<CheckpointView, CheckpointError> {
    view.flip_element(name, index, bit)
}

pub fn write_checkpoint(view: &CheckpointView) -> Vec<u8> {
    view.to_bytes()
}

/// Fraction of elements with each bit set, indexed by bit position.
///
/// A selection with no elements yields all zeros.
pub fn bit_statistics<S: AsRef<str>>(
    view: &CheckpointView,
    names: &[S],
) -> Result<[f64; 16], CheckpointError> {
    let mut counts = [0u64; 16];
    let mut total = 0u64;
    for name in names {
        for h in view.tensor_f16(name.as_ref())? {
            total += 1;
            let mut bits = h.0;
            while bits != 0 {
                counts[bits.trailing_zeros() as usize] += 1;
                bits &= bits - 1;
            }
        }
    }
    let mut out = [0.0; 16];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::half16::encode_half;

    fn halves(xs: &[f64]) -> Vec<Half16> {
        xs.iter().map(|&x| encode_half(x)).collect()
    }

    fn raw_container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn minimal_container() {
        let bytes = raw_container(
            r#"{"t":{"dtype":"F16","shape":[2,2],"data_offsets":[0,8]}}"#,
            &[0; 8],
        );
        let store = parse_checkpoint(&bytes).unwrap();
        assert_eq!(store.entry("t").unwrap().element_count(), 4);
        assert_eq!(store.tensor_f16("t").unwrap().len(), 4);
        assert_eq!(store.to_bytes(), bytes);
    }

    #[test]
    fn range_beyond_data() {
        let bytes = raw_container(
            r#"{"t":{"dtype":"F16","shape":[2,2],"data_offsets":[0,8]}}"#,
            &[0; 6],
        );
        assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::RangeError(_))));
    }

    #[test]
    fn overlapping_ranges() {
        let bytes = raw_container(
            r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},
                "b":{"dtype":"F16","shape":[2],"data_offsets":[2,6]}}"#,
            &[0; 8],
        );
        assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::RangeError(_))));
    }

    #[test]
    fn malformed_headers() {
        for header in [
            "not json",
            "[1,2]",
            r#"{"t":{"shape":[1],"data_offsets":[0,2]}}"#,
            r#"{"t":{"dtype":"F16","data_offsets":[0,2]}}"#,
            r#"{"t":{"dtype":"F16","shape":[1]}}"#,
            r#"{"t":{"dtype":"Q4","shape":[1],"data_offsets":[0,2]}}"#,
            r#"{"t":{"dtype":"F16","shape":[-1],"data_offsets":[0,2]}}"#,
        ] {
            let bytes = raw_container(header, &[0; 2]);
            assert!(
                matches!(parse_checkpoint(&bytes), Err(CheckpointError::MalformedHeader(_))),
                "{header}"
            );
        }
        assert!(matches!(
            parse_checkpoint(&[1, 2, 3]),
            Err(CheckpointError::MalformedHeader(_))
        ));
        let mut lying = 1000u64.to_le_bytes().to_vec();
        lying.extend_from_slice(b"{}");
        assert!(matches!(parse_checkpoint(&lying), Err(CheckpointError::MalformedHeader(_))));
    }

    #[test]
    fn length_must_match_shape() {
        let bytes = raw_container(
            r#"{"t":{"dtype":"F16","shape":[3],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::RangeError(_))));
    }

    #[test]
    fn non_f16_tensor_parses_but_rejects_f16_access() {
        let bytes = raw_container(
            r#"{"__metadata__":{"format":"pt"},"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        let store = parse_checkpoint(&bytes).unwrap();
        assert_eq!(store.header().metadata().unwrap()["format"], "pt");
        assert!(matches!(store.read("t", 0), Err(CheckpointError::DtypeError { .. })));
        let view = store.into_view();
        assert!(matches!(
            view.flip_element("t", 0, BitPosition::EXPONENT_MSB),
            Err(CheckpointError::DtypeError { .. })
        ));
    }

    fn sample_view() -> CheckpointView {
        let mut values = vec![encode_half(0.25); 10];
        values[7] = encode_half(0.5);
        CheckpointBuilder::new()
            .push_f16("w", &[2, 5], &values)
            .unwrap()
            .push_f16("z", &[3], &halves(&[0.0, 0.0, 0.0]))
            .unwrap()
            .build()
            .unwrap()
            .into_view()
    }

    #[test]
    fn flip_element_examples() {
        let base = sample_view();
        let v = base.flip_element("w", 7, BitPosition::EXPONENT_MSB).unwrap();
        assert_eq!(v.read("w", 7).unwrap().to_f64(), 32768.0);
        assert_eq!(base.read("w", 7).unwrap().to_f64(), 0.5);
        for i in (0..10).filter(|&i| i != 7) {
            assert_eq!(v.read("w", i).unwrap(), base.read("w", i).unwrap());
        }
        let back = v.flip_element("w", 7, BitPosition::EXPONENT_MSB).unwrap();
        assert!(back.is_pristine());
        assert_eq!(back.to_bytes(), base.to_bytes());
        assert!(matches!(
            base.flip_element("w", 10, BitPosition::EXPONENT_MSB),
            Err(CheckpointError::IndexError { index: 10, len: 10, .. })
        ));
        assert!(matches!(
            base.flip_element("nope", 0, BitPosition::EXPONENT_MSB),
            Err(CheckpointError::UnknownTensor(_))
        ));
    }

    #[test]
    fn view_tensor_applies_overlay() {
        let base = sample_view();
        let v = base.flip_element("w", 2, BitPosition::SIGN).unwrap();
        let t = v.tensor_f16("w").unwrap();
        assert_eq!(t[2].to_f64(), -0.25);
        assert_eq!(v.tensor_f16("z").unwrap(), base.tensor_f16("z").unwrap());
        assert_eq!(v.dirty_tensors(), vec!["w"]);
        assert_eq!(v.overlay_entries().count(), 1);
    }

    #[test]
    fn bit_statistics_examples() {
        let view = CheckpointBuilder::new()
            .push_f16("zero", &[4], &halves(&[0.0; 4]))
            .unwrap()
            .push_f16("half", &[2], &halves(&[0.5, 0.5]))
            .unwrap()
            .build()
            .unwrap()
            .into_view();
        assert_eq!(bit_statistics(&view, &["zero"]).unwrap(), [0.0; 16]);
        let stats = bit_statistics(&view, &["half"]).unwrap();
        for (p, &s) in stats.iter().enumerate() {
            let want = if (11..=13).contains(&p) { 1.0 } else { 0.0 };
            assert_eq!(s, want, "bit {p}");
        }
        assert!(matches!(
            bit_statistics(&view, &["missing"]),
            Err(CheckpointError::UnknownTensor(_))
        ));
        let empty: [&str; 0] = [];
        assert_eq!(bit_statistics(&view, &empty).unwrap(), [0.0; 16]);
    }

    #[test]
    fn write_roundtrip_and_flip_diff() {
        let base = sample_view();
        let bytes = write_checkpoint(&base);
        assert_eq!(parse_checkpoint(&bytes).unwrap().to_bytes(), bytes);

        let v = base.flip_element("w", 7, BitPosition::EXPONENT_MSB).unwrap();
        let flipped = write_checkpoint(&v);
        let offset = base.base().element_file_offset("w", 7).unwrap();
        let diffs: Vec<usize> = (0..bytes.len()).filter(|&i| bytes[i] != flipped[i]).collect();
        assert!(!diffs.is_empty() && diffs.len() <= 2);
        assert!(diffs.iter().all(|&i| i == offset || i == offset + 1));
        let reparsed = parse_checkpoint(&flipped).unwrap();
        assert_eq!(reparsed.read("w", 7).unwrap().to_f64(), 32768.0);
    }

    #[test]
    fn empty_store_is_valid() {
        let store = CheckpointBuilder::new().build().unwrap();
        let bytes = store.to_bytes();
        assert_eq!(bytes.len() % 8, 0);
        let parsed = parse_checkpoint(&bytes).unwrap();
        assert_eq!(parsed.header().entries().len(), 0);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn builder_rejects_duplicates() {
        let r = CheckpointBuilder::new()
            .push_f16("a", &[1], &halves(&[0.0]))
            .unwrap()
            .push_f16("a", &[1], &halves(&[0.0]))
            .unwrap()
            .build();
        assert!(matches!(r, Err(CheckpointError::DuplicateName(_))));
    }
}
