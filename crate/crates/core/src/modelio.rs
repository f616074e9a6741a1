//! The bit-exact model container shared by every serialized artifact:
//! generated verifiers, the frozen backbone, the generator, and the cached
//! cluster index.
//!
//! Byte layout: magic "HNFV", version u16 LE, role u8, header-length u32 LE,
//! UTF-8 JSON header, payload of f32 LE values in layout order, trailing
//! CRC32 of header + payload. No timestamps anywhere, so identical inputs
//! produce byte-identical files.

use crate::backbone::EmbeddingBackbone;
use crate::error::{Error, Result};
use crate::hypernet::{HyperNetwork, ThetaLayout, WeightSet};
use crate::kcs::ClusterIndex;
use crate::tensor::Tensor;
use crate::verifier::VerifierArchitecture;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"HNFV";
pub const VERSION: u16 = 1;

/// What kind of artifact a model file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Verifier,
    Backbone,
    Hypernet,
    ClusterIndex,
}

impl ModelRole {
    pub fn tag(self) -> u8 {
        match self {
            ModelRole::Verifier => 0,
            ModelRole::Backbone => 1,
            ModelRole::Hypernet => 2,
            ModelRole::ClusterIndex => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ModelRole> {
        match tag {
            0 => Some(ModelRole::Verifier),
            1 => Some(ModelRole::Backbone),
            2 => Some(ModelRole::Hypernet),
            3 => Some(ModelRole::ClusterIndex),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Verifier => "verifier",
            ModelRole::Backbone => "backbone",
            ModelRole::Hypernet => "hypernet",
            ModelRole::ClusterIndex => "cluster-index",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One named tensor in the payload layout table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutField {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Human-inspectable JSON header. Field order is fixed by the struct and
/// metadata keys are sorted, so serialization is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub layout: Vec<LayoutField>,
    pub architecture: String,
    pub input_size: usize,
    pub metadata: BTreeMap<String, String>,
    pub checksum: String,
    /// Role-specific structured data (the cluster index lives here).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl ModelHeader {
    pub fn new(layout: Vec<LayoutField>, architecture: &str, input_size: usize) -> ModelHeader {
        ModelHeader {
            layout,
            architecture: architecture.to_string(),
            input_size,
            metadata: BTreeMap::new(),
            checksum: "crc32".into(),
            extra: None,
        }
    }
}

/// A decoded (or to-be-encoded) model file: role, header, and the payload
/// tensors in layout order.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub role: ModelRole,
    pub header: ModelHeader,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ModelFile {
    pub fn new(
        role: ModelRole,
        architecture: &str,
        input_size: usize,
        tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> ModelFile {
        let layout = tensors
            .iter()
            .map(|(name, shape, _)| LayoutField { name: name.clone(), shape: shape.clone() })
            .collect();
        ModelFile {
            role,
            header: ModelHeader::new(layout, architecture, input_size),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    /// Encode to the container byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for ((name, shape, data), field) in self.tensors.iter().zip(&self.header.layout) {
            let want: usize = shape.iter().product();
            if data.len() != want || *name != field.name || *shape != field.shape {
                return Err(Error::Contract(format!(
                    "tensor '{name}' does not match its layout entry"
                )));
            }
        }
        if self.tensors.len() != self.header.layout.len() {
            return Err(Error::Contract("layout table and tensor list differ in length".into()));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.role.tag());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        let checked_from = out.len();
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[checked_from..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decode and validate a container, checking the role against what the
    /// caller expects.
    pub fn from_bytes(bytes: &[u8], expected: ModelRole) -> Result<ModelFile> {
        let need = |offset: usize, reason: &str| Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(need(0, "not a model file (bad magic)"));
        }
        if bytes.len() < 11 {
            return Err(need(bytes.len(), "truncated fixed header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version > VERSION {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let role = ModelRole::from_tag(bytes[6])
            .ok_or_else(|| need(6, &format!("unknown role tag {}", bytes[6])))?;
        if role != expected {
            return Err(Error::Role {
                expected: expected.name().into(),
                found: role.name().into(),
            });
        }
        let header_len = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
        let header_end = 11 + header_len;
        if bytes.len() < header_end + 4 {
            return Err(need(bytes.len(), "truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&bytes[11..header_end])?;
        let payload_f32: usize = header
            .layout
            .iter()
            .map(|f| f.shape.iter().product::<usize>())
            .sum();
        let payload_end = header_end + 4 * payload_f32;
        if bytes.len() < payload_end + 4 {
            return Err(need(bytes.len(), "truncated payload"));
        }
        if bytes.len() != payload_end + 4 {
            return Err(need(payload_end + 4, "trailing bytes after checksum"));
        }
        let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[11..payload_end]);
        if stored != computed {
            return Err(Error::Corruption { stored, computed });
        }
        let mut tensors = Vec::with_capacity(header.layout.len());
        let mut at = header_end;
        for field in &header.layout {
            let len: usize = field.shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64);
                at += 4;
            }
            tensors.push((field.name.clone(), field.shape.clone(), data));
        }
        Ok(ModelFile { role, header, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: impl AsRef<Path>, expected: ModelRole) -> Result<ModelFile> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ModelFile::from_bytes(&bytes, expected)
    }
}

fn layout_tensors(ws: &WeightSet) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    ws.layout()
        .entries()
        .iter()
        .map(|e| {
            let t = ws.tensor(&e.name).expect("layout entry resolves");
            (e.name.clone(), e.shape.clone(), t.to_vec())
        })
        .collect()
}

/// Serialize a generated verifier θ. The file alone suffices for later
/// verification; no backbone or generator is needed to use it.
pub fn save_verifier(
    ws: &WeightSet,
    arch_name: &str,
    input_size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    ModelFile::new(ModelRole::Verifier, arch_name, input_size, layout_tensors(ws)).write(path)
}

/// Load a verifier θ and the architecture it targets.
pub fn load_verifier(path: impl AsRef<Path>) -> Result<(WeightSet, VerifierArchitecture)> {
    let file = ModelFile::read(path, ModelRole::Verifier)?;
    let arch = VerifierArchitecture::by_name(&file.header.architecture)?;
    let layout = arch.layout();
    let mut flat = vec![0.0; layout.total_len()];
    for e in layout.entries() {
        let (shape, data) = file.tensor(&e.name).ok_or_else(|| {
            Error::Format { offset: 11, reason: format!("verifier file lacks tensor '{}'", e.name) }
        })?;
        if shape != e.shape.as_slice() {
            return Err(Error::Dimension {
                op: "load_verifier",
                lhs: shape.to_vec(),
                rhs: e.shape.clone(),
            });
        }
        flat[e.offset..e.offset + data.len()].copy_from_slice(data);
    }
    let ws = WeightSet::new(Tensor::from_vec(flat, &[layout.total_len()]), layout)?;
    Ok((ws, arch))
}

pub fn save_backbone(backbone: &EmbeddingBackbone, path: impl AsRef<Path>) -> Result<()> {
    let mut file = ModelFile::new(
        ModelRole::Backbone,
        "embedding-backbone",
        backbone.input_size(),
        backbone.named_tensors(),
    );
    file.header
        .metadata
        .insert("embedding_dim".into(), backbone.embedding_dim().to_string());
    file.header
        .metadata
        .insert("provenance".into(), backbone.provenance.clone());
    file.write(path)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<EmbeddingBackbone> {
    let file = ModelFile::read(path, ModelRole::Backbone)?;
    let dim: usize = file
        .header
        .metadata
        .get("embedding_dim")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format {
            offset: 11,
            reason: "backbone header lacks embedding_dim".into(),
        })?;
    let provenance = file
        .header
        .metadata
        .get("provenance")
        .cloned()
        .unwrap_or_else(|| "file".into());
    EmbeddingBackbone::from_named_tensors(
        file.header.input_size,
        dim,
        provenance,
        &file.tensors,
    )
}

pub fn save_hypernet(
    hn: &HyperNetwork,
    arch_name: &str,
    input_size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let tensors = hn
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    let mut file = ModelFile::new(ModelRole::Hypernet, arch_name, input_size, tensors);
    file.header
        .metadata
        .insert("input_dim".into(), hn.input_dim().to_string());
    file.write(path)
}

/// Load a generator together with the architecture whose θ it emits.
pub fn load_hypernet(path: impl AsRef<Path>) -> Result<(HyperNetwork, VerifierArchitecture)> {
    let file = ModelFile::read(path, ModelRole::Hypernet)?;
    let arch = VerifierArchitecture::by_name(&file.header.architecture)?;
    let input_dim: usize = file
        .header
        .metadata
        .get("input_dim")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format {
            offset: 11,
            reason: "hypernet header lacks input_dim".into(),
        })?;
    let layout: ThetaLayout = arch.layout();
    let hn = HyperNetwork::from_params(input_dim, layout, &file.tensors)?;
    Ok((hn, arch))
}

/// Cache a cluster index. The index is structured data, not tensors, so it
/// rides in the header's extra field with an empty payload.
pub fn save_cluster_index(index: &ClusterIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut file = ModelFile::new(ModelRole::ClusterIndex, "cluster-index", 0, Vec::new());
    file.header.extra = Some(serde_json::to_value(index)?);
    file.write(path)
}

pub fn load_cluster_index(path: impl AsRef<Path>) -> Result<ClusterIndex> {
    let file = ModelFile::read(path, ModelRole::ClusterIndex)?;
    let extra = file.header.extra.ok_or_else(|| Error::Format {
        offset: 11,
        reason: "cluster-index header lacks index data".into(),
    })?;
    Ok(serde_json::from_value(extra)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::HypernetConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_weight_set() -> (WeightSet, VerifierArchitecture) {
        let arch = VerifierArchitecture::desk32();
        let layout = arch.layout();
        // values exactly representable in f32 so the round trip is lossless
        let vals: Vec<f64> = (0..layout.total_len())
            .map(|i| (i as f64 % 17.0 - 8.0) * 0.25)
            .collect();
        let ws = WeightSet::new(Tensor::from_vec(vals, &[layout.total_len()]), layout).unwrap();
        (ws, arch)
    }

    #[test]
    fn verifier_round_trip_is_bit_exact() {
        let (ws, arch) = sample_weight_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.hnfv");
        save_verifier(&ws, "desk32", arch.input_size, &path).unwrap();
        let (back, arch2) = load_verifier(&path).unwrap();
        assert_eq!(arch2.input_size, arch.input_size);
        assert_eq!(back.flat().to_vec(), ws.flat().to_vec());
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let (ws, arch) = sample_weight_set();
        let f1 = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        );
        let a = f1.to_bytes().unwrap();
        let b = f1.to_bytes().unwrap();
        assert_eq!(a, b);
        // decode and re-encode: still the same bytes
        let decoded = ModelFile::from_bytes(&a, ModelRole::Verifier).unwrap();
        assert_eq!(decoded.to_bytes().unwrap(), a);
    }

    #[test]
    fn desk32_payload_is_16260_bytes() {
        let (ws, arch) = sample_weight_set();
        let file = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        );
        let bytes = file.to_bytes().unwrap();
        let header_len = serde_json::to_vec(&file.header).unwrap().len();
        // fixed prefix 11 + header + 4 * 4065 payload + 4 CRC
        assert_eq!(bytes.len(), 11 + header_len + 4 * 4065 + 4);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = ModelFile::from_bytes(b"nope", ModelRole::Verifier).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        let err = ModelFile::from_bytes(b"", ModelRole::Verifier).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn future_version_rejected() {
        let (ws, arch) = sample_weight_set();
        let mut bytes = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        )
        .to_bytes()
        .unwrap();
        bytes[4..6].copy_from_slice(&99u16.to_le_bytes());
        let err = ModelFile::from_bytes(&bytes, ModelRole::Verifier).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, supported: 1 }), "{err}");
    }

    #[test]
    fn payload_bit_flip_detected() {
        let (ws, arch) = sample_weight_set();
        let mut bytes = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        )
        .to_bytes()
        .unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x01;
        let err = ModelFile::from_bytes(&bytes, ModelRole::Verifier).unwrap_err();
        assert!(matches!(err, Error::Corruption { .. }), "{err}");
    }

    #[test]
    fn truncation_names_offset() {
        let (ws, arch) = sample_weight_set();
        let bytes = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        )
        .to_bytes()
        .unwrap();
        let cut = &bytes[..bytes.len() / 2];
        let err = ModelFile::from_bytes(cut, ModelRole::Verifier).unwrap_err();
        match err {
            Error::Format { offset, reason } => {
                assert_eq!(offset as usize, cut.len());
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn role_mismatch_rejected() {
        let (ws, arch) = sample_weight_set();
        let bytes = ModelFile::new(
            ModelRole::Verifier,
            "desk32",
            arch.input_size,
            super::layout_tensors(&ws),
        )
        .to_bytes()
        .unwrap();
        let err = ModelFile::from_bytes(&bytes, ModelRole::Backbone).unwrap_err();
        match err {
            Error::Role { expected, found } => {
                assert_eq!(expected, "backbone");
                assert_eq!(found, "verifier");
            }
            other => panic!("expected role error, got {other}"),
        }
    }

    #[test]
    fn hypernet_round_trip_preserves_outputs() {
        let arch = VerifierArchitecture::desk32();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hn = HyperNetwork::new(
            8,
            arch.layout(),
            &HypernetConfig { hidden: vec![16], final_init_scale: 0.01 },
            &mut rng,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.hnfv");
        save_hypernet(&hn, "desk32", arch.input_size, &path).unwrap();
        let (back, _) = load_hypernet(&path).unwrap();
        let e = Tensor::from_vec((0..8).map(|i| 0.25 * i as f64).collect(), &[1, 8]);
        let a = hn.forward(&e).unwrap().to_vec();
        let b = back.forward(&e).unwrap().to_vec();
        // payload is f32, so outputs agree to f32 precision
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn cluster_index_round_trip() {
        let points: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i % 3) as f64, (i / 3) as f64])
            .collect();
        let index = crate::kcs::kmeans(&points, 3, 20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hnfv");
        save_cluster_index(&index, &path).unwrap();
        let back = load_cluster_index(&path).unwrap();
        assert_eq!(back, index);
    }
}
