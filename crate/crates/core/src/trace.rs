//! Activation traces and the ACTR container format.
//!
//! An ACTR file is laid out as:
//!
//! ```text
//! magic    4 bytes   "ACTR"
//! version  u32 LE    1
//! hdr_len  u64 LE    length of the JSON header in bytes
//! header   hdr_len   UTF-8 JSON {model_id, layers, dim, tokens, annotations}
//! payload  L*n*d*4   f32 LE, layer-major, then token, then neuron
//! ```
//!
//! The same framing (with a different magic) is reused for UCD dictionaries.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTR_MAGIC: [u8; 4] = *b"ACTR";
pub const ACTR_VERSION: u32 = 1;

/// Occurrences of a concept, optionally shifted in time.
///
/// `shift` is `0` for the occurrence itself, `+k` for a position `k` steps
/// after it (memory of a past signal) and `-k` for `k` steps before it
/// (prediction of a future signal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub concept: String,
    pub indices: Vec<usize>,
    #[serde(default)]
    pub shift: i64,
}

impl ConceptAnnotation {
    pub fn new(concept: impl Into<String>, indices: Vec<usize>) -> Self {
        Self {
            concept: concept.into(),
            indices,
            shift: 0,
        }
    }

    pub fn validate(&self, token_count: usize) -> Result<()> {
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation(
                "annotations",
                format!("indices of '{}' are not strictly increasing", self.concept),
            ));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= token_count) {
            return Err(Error::validation(
                "annotations",
                format!(
                    "index {bad} of '{}' out of range for {token_count} tokens",
                    self.concept
                ),
            ));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Layerwise per-token hidden states with token text and concept annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub model_id: String,
    pub layers: usize,
    pub dim: usize,
    pub tokens: Vec<String>,
    /// `layers * tokens.len() * dim` values, layer-major.
    pub activations: Vec<f32>,
    pub annotations: Vec<ConceptAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    model_id: String,
    layers: usize,
    dim: usize,
    tokens: Vec<String>,
    annotations: Vec<ConceptAnnotation>,
}

impl ActivationTrace {
    /// Builds a trace and checks every invariant.
    pub fn new(
        model_id: impl Into<String>,
        layers: usize,
        dim: usize,
        tokens: Vec<String>,
        activations: Vec<f32>,
        annotations: Vec<ConceptAnnotation>,
    ) -> Result<Self> {
        let trace = Self {
            model_id: model_id.into(),
            layers,
            dim,
            tokens,
            activations,
            annotations,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::validation("layers", "must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be positive"));
        }
        if self.tokens.is_empty() {
            return Err(Error::validation("tokens", "trace has no tokens"));
        }
        let expected = self.layers * self.tokens.len() * self.dim;
        if self.activations.len() != expected {
            return Err(Error::validation(
                "activations",
                format!(
                    "expected {expected} values for L={} n={} d={}, found {}",
                    self.layers,
                    self.tokens.len(),
                    self.dim,
                    self.activations.len()
                ),
            ));
        }
        if let Some(pos) = self.activations.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "activations",
                format!("non-finite value at flat offset {pos}"),
            ));
        }
        for ann in &self.annotations {
            ann.validate(self.tokens.len())?;
        }
        Ok(())
    }

    /// Activation vector of one token at one layer.
    pub fn state(&self, layer: usize, token: usize) -> &[f32] {
        let n = self.tokens.len();
        let start = (layer * n + token) * self.dim;
        &self.activations[start..start + self.dim]
    }

    /// All token states of one layer as a row-major `n x d` slice.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let block = self.tokens.len() * self.dim;
        &self.activations[layer * block..(layer + 1) * block]
    }

    pub fn annotation(&self, concept: &str) -> Option<&ConceptAnnotation> {
        self.annotations.iter().find(|a| a.concept == concept)
    }
}

/// Serializes `magic | version | header length | header | payload`.
pub(crate) fn encode_container<H: Serialize>(magic: [u8; 4], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + payload.len() * 4);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&ACTR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub(crate) fn write_container<H: Serialize>(
    path: &Path,
    magic: [u8; 4],
    header: &H,
    payload: &[f32],
) -> Result<()> {
    let buf = encode_container(magic, header, payload)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a container; `payload_len` maps the header to its expected float count.
pub(crate) fn read_container<H: DeserializeOwned>(
    path: &Path,
    magic: [u8; 4],
    payload_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes, magic, payload_len)
}

pub(crate) fn parse_container<H: DeserializeOwned>(
    bytes: &[u8],
    magic: [u8; 4],
    payload_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Format("file shorter than the fixed preamble".into()));
    }
    if bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &bytes[..4],
            magic
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ACTR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| header_overflow())?)
        .ok_or_else(header_overflow)?;
    if header_end > bytes.len() {
        return Err(Error::Format("header extends past end of file".into()));
    }
    let header: H = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("header json: {e}")))?;
    let floats = payload_len(&header)?;
    let payload = &bytes[header_end..];
    if floats.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload length mismatch: header declares {floats} floats ({} bytes), found {} bytes",
            floats.saturating_mul(4),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn header_overflow() -> Error {
    Error::Format("header length overflows".into())
}

/// In-memory counterpart of [`write_trace`].
pub fn encode_trace(trace: &ActivationTrace) -> Result<Vec<u8>> {
    trace.validate()?;
    let header = TraceHeader {
        model_id: trace.model_id.clone(),
        layers: trace.layers,
        dim: trace.dim,
        tokens: trace.tokens.clone(),
        annotations: trace.annotations.clone(),
    };
    encode_container(ACTR_MAGIC, &header, &trace.activations)
}

pub fn write_trace(trace: &ActivationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = encode_trace(trace)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<ActivationTrace> {
    let (header, activations) =
        read_container(path.as_ref(), ACTR_MAGIC, |h: &TraceHeader| {
            h.layers
                .checked_mul(h.tokens.len())
                .and_then(|v| v.checked_mul(h.dim))
                .ok_or_else(|| Error::Format("dimension product overflows".into()))
        })?;
    from_parts(header, activations)
}

/// Decodes an in-memory ACTR image.
pub fn decode_trace(bytes: &[u8]) -> Result<ActivationTrace> {
    let (header, activations) = parse_container(bytes, ACTR_MAGIC, |h: &TraceHeader| {
        h.layers
            .checked_mul(h.tokens.len())
            .and_then(|v| v.checked_mul(h.dim))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))
    })?;
    from_parts(header, activations)
}

fn from_parts(header: TraceHeader, activations: Vec<f32>) -> Result<ActivationTrace> {
    ActivationTrace::new(
        header.model_id,
        header.layers,
        header.dim,
        header.tokens,
        activations,
        header.annotations,
    )
}

/// Lowercased, whitespace-collapsed text with the source token of every char.
fn normalized_chars<'a>(pieces: impl Iterator<Item = (usize, &'a str)>) -> (Vec<char>, Vec<usize>) {
    let mut chars = Vec::new();
    let mut owner = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (tok, piece) in pieces {
        for c in piece.chars() {
            if c.is_whitespace() {
                if pending_space.is_none() {
                    pending_space = Some(tok);
                }
                continue;
            }
            if let Some(space_tok) = pending_space.take() {
                if !chars.is_empty() {
                    chars.push(' ');
                    owner.push(space_tok);
                }
            }
            for lc in c.to_lowercase() {
                chars.push(lc);
                owner.push(tok);
            }
        }
    }
    (chars, owner)
}

/// Finds whole-word occurrences of `concept` in the detokenized text and
/// anchors each one at the token holding its final character.
pub fn annotate_occurrences(tokens: &[String], concept: &str) -> Result<ConceptAnnotation> {
    let (needle, _) = normalized_chars(std::iter::once((0, concept)));
    if needle.is_empty() {
        return Err(Error::arg("concept is empty"));
    }
    let (text, owner) = normalized_chars(tokens.iter().map(String::as_str).enumerate());
    let mut indices = Vec::new();
    if text.len() >= needle.len() {
        for start in 0..=text.len() - needle.len() {
            let end = start + needle.len();
            if text[start..end] != needle[..] {
                continue;
            }
            let left_ok = start == 0 || !text[start - 1].is_alphanumeric();
            let right_ok = end == text.len() || !text[end].is_alphanumeric();
            if left_ok && right_ok {
                let tok = owner[end - 1];
                if indices.last() != Some(&tok) {
                    indices.push(tok);
                }
            }
        }
    }
    Ok(ConceptAnnotation::new(concept, indices))
}

/// Moves every index by `k` (t -> t + k) and drops those leaving `[0, n)`.
pub fn shift_annotation(ann: &ConceptAnnotation, k: i64, n: usize) -> ConceptAnnotation {
    let indices = ann
        .indices
        .iter()
        .filter_map(|&t| {
            let s = t as i64 + k;
            (s >= 0 && (s as usize) < n).then_some(s as usize)
        })
        .collect();
    ConceptAnnotation {
        concept: ann.concept.clone(),
        indices,
        shift: ann.shift + k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn tiny(l: usize, n: usize, d: usize) -> ActivationTrace {
        ActivationTrace::new(
            "tiny",
            l,
            d,
            (0..n).map(|i| format!("t{i}")).collect(),
            vec![0.0; l * n * d],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn zero_trace_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.actr");
        let trace = tiny(1, 2, 3);
        write_trace(&trace, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[..4], &[0x41, 0x43, 0x54, 0x52]);
        assert_eq!(bytes.len(), 16 + hdr_len + 24);
        assert_eq!(read_trace(&path).unwrap(), trace);
    }

    #[test]
    fn llama_shaped_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.actr");
        let trace = tiny(32, 3, 4096);
        write_trace(&trace, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 16 - hdr_len, 32 * 3 * 4096 * 4);
    }

    #[test]
    fn annotation_out_of_range_rejected() {
        let mut trace = tiny(1, 4, 2);
        trace.annotations.push(ConceptAnnotation::new("x", vec![4]));
        let err = trace.validate().unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        assert!(write_trace(&trace, dir.path().join("bad.actr")).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut trace = tiny(1, 2, 2);
        trace.activations[3] = f32::NAN;
        assert!(matches!(
            trace.validate(),
            Err(Error::Validation { field: "activations", .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.actr");
        write_trace(&tiny(2, 3, 5), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Vec::from(*b"ACTX");
        bytes.extend_from_slice(&[0u8; 20]);
        assert!(matches!(decode_trace(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.actr");
        let b = dir.path().join("b.actr");
        let mut trace = tiny(2, 3, 2);
        trace.activations = (0..12).map(|i| i as f32 * 0.37 - 1.0).collect();
        trace.annotations.push(ConceptAnnotation {
            concept: "t1".into(),
            indices: vec![1],
            shift: -1,
        });
        write_trace(&trace, &a).unwrap();
        write_trace(&read_trace(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn last_token_anchor() {
        let ann = annotate_occurrences(&toks(&["che", "ese", " is"]), "cheese").unwrap();
        assert_eq!(ann.indices, vec![1]);
    }

    #[test]
    fn two_tokenizations() {
        let t = toks(&["I", " like", " cheese", ".", " Che", "ese", " is", " good"]);
        let ann = annotate_occurrences(&t, "cheese").unwrap();
        assert_eq!(ann.indices, vec![2, 5]);
    }

    #[test]
    fn whole_word_only() {
        let t = toks(&["cheese", "cake", " and", " cheese"]);
        assert_eq!(annotate_occurrences(&t, "cheese").unwrap().indices, vec![3]);
        assert_eq!(annotate_occurrences(&t, "cheesecake").unwrap().indices, vec![1]);
    }

    #[test]
    fn absent_concept_is_empty() {
        let ann = annotate_occurrences(&toks(&["a", "b"]), "cheese").unwrap();
        assert!(ann.is_empty());
        assert!(annotate_occurrences(&toks(&["a"]), "  ").is_err());
    }

    #[test]
    fn whitespace_runs_collapse() {
        let t = toks(&["ice", "  ", "\tcream", "!"]);
        assert_eq!(annotate_occurrences(&t, "Ice Cream").unwrap().indices, vec![2]);
    }

    #[test]
    fn shifting() {
        let ann = ConceptAnnotation::new("c", vec![5, 9]);
        assert_eq!(shift_annotation(&ann, 2, 12).indices, vec![7, 11]);
        assert_eq!(shift_annotation(&ann, 2, 12).shift, 2);
        let zero = ConceptAnnotation::new("c", vec![0]);
        assert!(shift_annotation(&zero, -1, 12).indices.is_empty());
        let five = ConceptAnnotation::new("c", vec![5]);
        assert_eq!(shift_annotation(&five, 0, 12).indices, vec![5]);
    }
}
