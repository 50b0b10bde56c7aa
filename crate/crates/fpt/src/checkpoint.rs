//! Bit-exact model persistence.
//!
//! Container layout (single file):
//!   magic "FPTC" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload
//!
//! The header carries the architecture spec and a named tensor index (name,
//! group, shape, byte offset into the payload, sha256 of the tensor bytes).
//! The payload is the concatenation of little-endian f32 buffers. Writes go
//! through a temp file and an atomic rename.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{Model, ModelError, ModelFamily, ModelSpec, ParamGroup};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {expected})")]
    Version { got: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checksum mismatch for tensor {name}")]
    Checksum { name: String },
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("unknown tensor name {0}")]
    UnknownTensor(String),
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("shape mismatch for {name}: checkpoint {ckpt:?}, model {model:?}")]
    ShapeMismatch { name: String, ckpt: Vec<usize>, model: Vec<usize> },
    #[error("name map leaves tensors unmapped: {0:?}")]
    Unmapped(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: the header spec plus every named tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, ParamGroup, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .registry()
            .iter()
            .map(|p| {
                let b = p.borrow();
                (b.name.clone(), b.group, b.value.clone())
            })
            .collect();
        Self { spec: model.spec().clone(), tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Streams a model to disk without cloning its tensors.
pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for p in model.registry().iter() {
        let b = p.borrow();
        let bytes = tensor_bytes(&b.value);
        entries.push(TensorEntry {
            name: b.name.clone(),
            group: b.group,
            shape: b.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            sha256: sha256_hex(&bytes),
        });
        offset += bytes.len() as u64;
    }
    let header = Header { spec: model.spec().clone(), tensors: entries };
    write_container(&header, path, |w| {
        for p in model.registry().iter() {
            let b = p.borrow();
            w.write_all(&tensor_bytes(&b.value))?;
        }
        Ok(())
    })
}

/// Writes an in-memory checkpoint (e.g. from [`import_foreign`]) to disk.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, group, t) in &ckpt.tensors {
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name: name.clone(),
            group: *group,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            sha256: sha256_hex(&bytes),
        });
        offset += bytes.len() as u64;
    }
    let header = Header { spec: ckpt.spec.clone(), tensors: entries };
    write_container(&header, path, |w| {
        for (_, _, t) in &ckpt.tensors {
            w.write_all(&tensor_bytes(t))?;
        }
        Ok(())
    })
}

fn write_container(
    header: &Header,
    path: &Path,
    payload: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CheckpointError> {
    let header_json = serde_json::to_vec(header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        payload(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::Version { got: version, expected: VERSION });
    }
    let mut hl = [0u8; 8];
    r.read_exact(&mut hl)?;
    let header_len = u64::from_le_bytes(hl) as usize;
    let mut buf = vec![0u8; header_len];
    r.read_exact(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Reads the full checkpoint into memory, verifying every tensor checksum.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|err| {
            if err.kind() == std::io::ErrorKind::UnexpectedEof {
                CheckpointError::Truncated { expected: (n * 4) as u64, actual: 0 }
            } else {
                CheckpointError::Io(err)
            }
        })?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(CheckpointError::Checksum { name: e.name.clone() });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((
            e.name.clone(),
            e.group,
            Tensor::new(e.shape.clone(), data).expect("shape/data consistent by construction"),
        ));
    }
    Ok(Checkpoint { spec: header.spec, tensors })
}

/// Header only, without reading the payload.
pub fn load_header(path: &Path) -> Result<Header, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

/// Copies checkpoint tensors into a model, by name, requiring an exact
/// one-to-one correspondence.
pub fn load_into(model: &Model, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    for p in model.registry().iter() {
        let mut b = p.borrow_mut();
        let t = ckpt
            .get(&b.name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: b.name.clone() })?;
        if t.shape() != b.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: b.name.clone(),
                ckpt: t.shape().to_vec(),
                model: b.value.shape().to_vec(),
            });
        }
        b.value = t.clone();
    }
    for (name, _, _) in &ckpt.tensors {
        if model.registry().get(name).is_none() {
            return Err(CheckpointError::UnknownTensor(name.clone()));
        }
    }
    Ok(())
}

/// Rebuilds the model described by the checkpoint header and fills in its
/// tensors bit-exactly.
pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let ckpt = load(path)?;
    // builder values are overwritten; the seed only feeds throwaway init
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = match ckpt.spec.family {
        ModelFamily::Transformer => {
            Model::Transformer(crate::models::Transformer::build(&ckpt.spec, 0.02, &mut rng)?)
        }
        ModelFamily::Lstm => Model::Lstm(crate::models::Lstm::build(&ckpt.spec, 0.02, &mut rng)?),
    };
    load_into(&model, &ckpt)?;
    Ok(model)
}

/// Renames the tensors of a native-format file according to
/// `name_map` (foreign name -> native name) and validates shapes against a
/// target architecture. The resulting checkpoint carries `target` as its spec.
pub fn import_foreign(
    path: &Path,
    name_map: &BTreeMap<String, String>,
    target: &ModelSpec,
) -> Result<Checkpoint, CheckpointError> {
    let foreign = load(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let template = match target.family {
        ModelFamily::Transformer => {
            Model::Transformer(crate::models::Transformer::build(target, 0.02, &mut rng)?)
        }
        ModelFamily::Lstm => Model::Lstm(crate::models::Lstm::build(target, 0.02, &mut rng)?),
    };

    let mut unmapped: Vec<String> = Vec::new();
    let mut tensors = Vec::with_capacity(foreign.tensors.len());
    for (name, group, t) in &foreign.tensors {
        match name_map.get(name) {
            None => unmapped.push(name.clone()),
            Some(native) => tensors.push((native.clone(), *group, t.clone())),
        }
    }
    if !unmapped.is_empty() {
        unmapped.sort();
        return Err(CheckpointError::Unmapped(unmapped));
    }

    // every target tensor must be present with the right shape
    for p in template.registry().iter() {
        let b = p.borrow();
        let found = tensors.iter().find(|(n, _, _)| *n == b.name);
        match found {
            None => return Err(CheckpointError::MissingTensor { name: b.name.clone() }),
            Some((_, _, t)) => {
                if t.shape() != b.value.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: b.name.clone(),
                        ckpt: t.shape().to_vec(),
                        model: b.value.shape().to_vec(),
                    });
                }
            }
        }
    }
    for (name, _, _) in &tensors {
        if template.registry().get(name).is_none() {
            return Err(CheckpointError::UnknownTensor(name.clone()));
        }
    }

    Ok(Checkpoint { spec: target.clone(), tensors })
}

/// Adam moment buffers for the trainable partition, stored as a sibling
/// container (never needed for inference).
#[derive(Debug, Serialize, Deserialize)]
pub struct OptimizerStateFile {
    pub step: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

pub fn save_optimizer_state(state: &OptimizerStateFile, path: &Path) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_optimizer_state(path: &Path) -> Result<OptimizerStateFile, CheckpointError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use rand::SeedableRng;

    use crate::models::{build_transformer, Batch, ReadoutMode, Targets};
    use crate::policy::InitScheme;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_spec() -> ModelSpec {
        let mut spec = ModelSpec::transformer(2, 16, 2);
        spec.max_len = 8;
        spec.d_in = 3;
        spec.d_out = 4;
        spec.dropout_rate = 0.0;
        spec
    }

    fn tiny_model(seed: u64) -> Model {
        build_transformer(&tiny_spec(), &InitScheme::default(), &mut rng(seed)).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    fn assert_bit_equal(a: &Model, b: &Model) {
        assert_eq!(a.registry().len(), b.registry().len());
        for p in a.registry().iter() {
            let pa = p.borrow();
            let q = b.registry().get(&pa.name).expect(&pa.name);
            let pb = q.borrow();
            assert_eq!(pa.group, pb.group, "{}", pa.name);
            assert_eq!(pa.value.shape(), pb.value.shape(), "{}", pa.name);
            assert_eq!(bits(&pa.value), bits(&pb.value), "{}", pa.name);
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        let model = tiny_model(1);
        save(&model, &path).unwrap();
        assert!(!path.with_extension("tmp").exists());

        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        assert_bit_equal(&model, &loaded);

        // identical forward behavior on a random batch
        let batch = Batch {
            sequences: vec![Tensor::randn(&[5, 3], 0.0, 1.0, &mut rng(9))],
            targets: Targets::Classes(vec![0]),
        };
        let a = model.forward(&batch, &mut rng(0)).unwrap();
        let b = loaded.forward(&batch, &mut rng(0)).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn header_offsets_are_contiguous_and_cover_the_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        let model = tiny_model(2);
        save(&model, &path).unwrap();

        let header = load_header(&path).unwrap();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            assert_eq!(e.offset, expected_offset, "{}", e.name);
            assert_eq!(e.dtype, "f32");
            expected_offset += 4 * e.shape.iter().product::<usize>() as u64;
        }
        let header_json = serde_json::to_vec(&header).unwrap();
        let file_len = fs::metadata(&path).unwrap().len();
        assert_eq!(file_len, 4 + 4 + 8 + header_json.len() as u64 + expected_offset);
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        save(&tiny_model(3), &path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();

        assert!(matches!(load(&path), Err(CheckpointError::Checksum { .. })));
        assert!(load_model(&path).is_err(), "no partial model on corruption");
    }

    #[test]
    fn truncated_magic_and_version_problems_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        save(&tiny_model(4), &path).unwrap();
        let good = fs::read(&path).unwrap();

        // payload cut short
        fs::write(&path, &good[..good.len() - 100]).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::Truncated { .. } | CheckpointError::Io(_))
        ));

        // wrong magic
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));

        // unsupported version
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::Version { got: 99, expected: 1 })
        ));
    }

    #[test]
    fn load_into_requires_exact_name_and_shape_correspondence() {
        let model = tiny_model(5);
        let mut ckpt = Checkpoint::from_model(&model);

        // missing tensor
        let removed = ckpt.tensors.remove(0);
        assert!(matches!(
            load_into(&model, &ckpt),
            Err(CheckpointError::MissingTensor { .. })
        ));
        ckpt.tensors.insert(0, removed);

        // extra tensor
        ckpt.tensors.push(("stray".into(), ParamGroup::Output, Tensor::zeros(&[1, 1])));
        assert!(matches!(
            load_into(&model, &ckpt),
            Err(CheckpointError::UnknownTensor(ref n)) if n == "stray"
        ));
        ckpt.tensors.pop();

        // shape mismatch
        let i = ckpt.tensors.iter().position(|(n, _, _)| n == "head.w").unwrap();
        ckpt.tensors[i].2 = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            load_into(&model, &ckpt),
            Err(CheckpointError::ShapeMismatch { ref name, .. }) if name == "head.w"
        ));
    }

    #[test]
    fn loading_into_a_truncated_model_keeps_the_shared_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        let model = tiny_model(6);
        save(&model, &path).unwrap();
        let ckpt = load(&path).unwrap();

        let cut = model.truncate_layers(1, 0.02, &mut rng(7)).unwrap();
        for p in cut.registry().iter() {
            let b = p.borrow();
            if b.name == "head.w" {
                continue; // truncation redraws the head
            }
            let t = ckpt.get(&b.name).expect(&b.name);
            assert_eq!(bits(t), bits(&b.value), "{}", b.name);
        }
    }

    #[test]
    fn identity_import_reproduces_the_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        let model = tiny_model(8);
        save(&model, &path).unwrap();

        let identity: BTreeMap<String, String> = model
            .registry()
            .iter()
            .map(|p| {
                let n = p.borrow().name.clone();
                (n.clone(), n)
            })
            .collect();
        let imported = import_foreign(&path, &identity, model.spec()).unwrap();
        for p in model.registry().iter() {
            let b = p.borrow();
            let t = imported.get(&b.name).expect(&b.name);
            assert_eq!(bits(t), bits(&b.value), "{}", b.name);
        }
    }

    #[test]
    fn import_reports_exactly_the_unmapped_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        let model = tiny_model(9);
        save(&model, &path).unwrap();

        let mut map: BTreeMap<String, String> = model
            .registry()
            .iter()
            .map(|p| {
                let n = p.borrow().name.clone();
                (n.clone(), n)
            })
            .collect();
        map.remove("h1.mlp.w2");
        assert!(matches!(
            import_foreign(&path, &map, model.spec()),
            Err(CheckpointError::Unmapped(ref names)) if names == &["h1.mlp.w2".to_string()]
        ));
    }

    fn fixture(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
    }

    #[test]
    fn imported_reference_checkpoint_matches_the_stored_activations() {
        let meta: serde_json::Value =
            serde_json::from_slice(&fs::read(fixture("foreign_tiny.json")).unwrap()).unwrap();
        let name_map: BTreeMap<String, String> =
            serde_json::from_value(meta["name_map"].clone()).unwrap();
        let spec: ModelSpec = serde_json::from_value(meta["spec"].clone()).unwrap();
        assert_eq!(spec.readout_mode, ReadoutMode::LastToken);

        let ckpt = import_foreign(&fixture("foreign_tiny.fptc"), &name_map, &spec).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let native = dir.path().join("native.fptc");
        save_checkpoint(&ckpt, &native).unwrap();
        let model = load_model(&native).unwrap();

        let input: Vec<Vec<f32>> = serde_json::from_value(meta["input"].clone()).unwrap();
        let want: Vec<f32> = serde_json::from_value(meta["logits"].clone()).unwrap();
        let flat: Vec<f32> = input.iter().flatten().copied().collect();
        let tokens = Tensor::new(vec![input.len(), spec.d_in], flat).unwrap();
        let batch = Batch {
            sequences: vec![tokens],
            targets: Targets::Classes(vec![0]),
        };
        let got = model.forward(&batch, &mut rng(0)).unwrap();

        assert_eq!(got.shape(), &[1, spec.d_out]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-4, "logit {g} vs reference {w}");
        }
    }

    #[test]
    fn optimizer_state_round_trips_through_its_sidecar_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.adam.json");
        let state = OptimizerStateFile {
            step: 42,
            moments: vec![("head.w".into(), vec![0.1, -0.2], vec![0.01, 0.02])],
        };
        save_optimizer_state(&state, &path).unwrap();
        let back = load_optimizer_state(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.moments, state.moments);
        assert!(!path.with_extension("tmp").exists());
    }
}
