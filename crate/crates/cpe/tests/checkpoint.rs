use cpe::checkpoint::{decode, encode, Checkpoint, FormatError, CHECKPOINT_MAGIC, FIXTURE_MAGIC};
use cpe_core::{Model, ModelConfig, NamedTensor, ParamStore};

fn small_config() -> ModelConfig {
    ModelConfig {
        base_size: 16,
        base_channels: 4,
        depth: 1,
        growth: 2,
        head_channels: 4,
        head_outputs: 2,
        ..ModelConfig::default()
    }
}

/// Hand-assembled container: entries are `(name, dims, offset)`, and the file
/// is padded with zero bytes to `file_len`.
fn raw(entries: &[(&str, &[u32], u64)], file_len: usize) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&CHECKPOINT_MAGIC);
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, off) in entries {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(0);
        b.push(dims.len() as u8);
        for d in *dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&off.to_le_bytes());
    }
    b.resize(file_len, 0);
    b
}

fn message(bytes: &[u8]) -> String {
    decode(bytes, CHECKPOINT_MAGIC).unwrap_err().to_string()
}

#[test]
fn save_load_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cpe");
    let ckpt = Checkpoint::seeded(small_config(), 11).unwrap();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(back.seed, 11);
    assert_eq!(back.model().unwrap(), Model::seeded(small_config(), 11).unwrap());
}

#[test]
fn seeded_init_is_deterministic() {
    let a = Checkpoint::seeded(small_config(), 42).unwrap().to_bytes();
    let b = Checkpoint::seeded(small_config(), 42).unwrap().to_bytes();
    let c = Checkpoint::seeded(small_config(), 43).unwrap().to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn default_checkpoint_parameter_count() {
    let ckpt = Checkpoint::seeded(ModelConfig::default(), 0).unwrap();
    assert_eq!(ckpt.params.scalar_count(), 1_124_608);
    assert_eq!(ckpt.model().unwrap().param_count(), 1_124_608);
}

#[test]
fn payloads_are_aligned_and_file_ends_at_last_payload() {
    let bytes = Checkpoint::seeded(small_config(), 3).unwrap().to_bytes();
    assert_eq!(&bytes[..4], b"CPE1");
    assert_eq!(bytes.len() % 4, 0);
    let file = decode(&bytes, CHECKPOINT_MAGIC).unwrap();
    assert_eq!(file.meta.len(), 44);
}

#[test]
fn structural_errors_have_distinct_messages() {
    let dup = message(&raw(&[("a", &[2], 64), ("a", &[2], 128)], 136));
    let overlap = message(&raw(&[("a", &[4], 64), ("b", &[4], 64)], 80));
    let truncated = message(&raw(&[("a", &[32], 64)], 100));
    assert!(dup.contains("duplicate tensor name `a`"), "{dup}");
    assert!(overlap.contains("overlaps"), "{overlap}");
    assert!(overlap.contains("`a`") && overlap.contains("`b`"), "{overlap}");
    assert!(truncated.contains("truncated"), "{truncated}");
    assert!(dup != overlap && overlap != truncated && dup != truncated);
}

#[test]
fn other_structural_errors() {
    // Payload overlapping the tensor table itself.
    assert!(matches!(
        decode(&raw(&[("a", &[1], 0)], 64), CHECKPOINT_MAGIC),
        Err(FormatError::Misaligned { .. }) | Err(FormatError::Overlap { .. })
    ));
    assert!(matches!(
        decode(&raw(&[("a", &[1], 32)], 64), CHECKPOINT_MAGIC),
        Err(FormatError::Misaligned { .. })
    ));
    // Trailing bytes after the last payload.
    assert!(matches!(
        decode(&raw(&[("a", &[1], 64)], 72), CHECKPOINT_MAGIC),
        Err(FormatError::Length { .. })
    ));
    // Header cut short.
    assert!(matches!(decode(b"CPE1\x01\0", CHECKPOINT_MAGIC), Err(FormatError::Truncated { .. })));
    let mut version = raw(&[], 16);
    version[4] = 2;
    assert!(matches!(decode(&version, CHECKPOINT_MAGIC), Err(FormatError::Version(2))));
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = Checkpoint::seeded(small_config(), 1).unwrap().to_bytes();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, FormatError::BadMagic { .. }));
    assert!(!err.is_io());
    // A fixture is not a checkpoint and vice versa.
    let fixture = encode(FIXTURE_MAGIC, &[], &ParamStore::new());
    assert!(matches!(Checkpoint::from_bytes(&fixture), Err(FormatError::BadMagic { .. })));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut store = ParamStore::new();
    store.insert("x", NamedTensor::new(vec![2], vec![1.0, f32::NAN]).unwrap()).unwrap();
    let bytes = encode(CHECKPOINT_MAGIC, &[], &store);
    let err = decode(&bytes, CHECKPOINT_MAGIC).unwrap_err().to_string();
    assert!(err.contains("`x`"), "{err}");
}

fn without(store: &ParamStore, skip: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| *n != skip) {
        out.insert(name, t.clone()).unwrap();
    }
    out
}

#[test]
fn missing_tensor_is_named() {
    let mut ckpt = Checkpoint::seeded(small_config(), 5).unwrap();
    ckpt.params = without(&ckpt.params, "level1/fusion/raw_w2");
    let reloaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let err = reloaded.model().unwrap_err().to_string();
    assert!(err.contains("level1/fusion/raw_w2"), "{err}");
}

#[test]
fn wrong_shape_tensor_is_named() {
    let mut ckpt = Checkpoint::seeded(small_config(), 5).unwrap();
    let name = "head/gamma/out/weight";
    let mut store = without(&ckpt.params, name);
    store.insert(name, NamedTensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
    ckpt.params = store;
    let err = ckpt.model().unwrap_err().to_string();
    assert!(err.contains(name), "{err}");
}

#[test]
fn unexpected_tensor_is_named() {
    let mut ckpt = Checkpoint::seeded(small_config(), 5).unwrap();
    ckpt.params.insert("level9/extra", NamedTensor::scalar(1.0)).unwrap();
    let err = ckpt.model().unwrap_err().to_string();
    assert!(err.contains("level9/extra"), "{err}");
}

#[test]
fn invalid_config_block_is_rejected() {
    let mut ckpt = Checkpoint::seeded(small_config(), 5).unwrap();
    ckpt.config.base_size = 2;
    let err = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap_err();
    assert!(err.to_string().contains("base_size"), "{err}");
}

#[test]
fn missing_file_is_io() {
    let err = Checkpoint::load("/nonexistent/dir/model.cpe").unwrap_err();
    assert!(err.is_io());
}
