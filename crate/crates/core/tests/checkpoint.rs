use ctxasr::asr::{AsrConfig, AsrModel};
use ctxasr::checkpoint::{decode, encode, load_checkpoint, restore_into, save_checkpoint, FORMAT_VERSION, MAGIC};
use ctxasr::pipeline::{TrainedAsr, TrainedExtractor, ASR_KIND, EXTRACTOR_KIND};
use ctxasr::extractor::{Extractor, ExtractorConfig};
use ctxasr::asr::ContextMode;
use ctxasr::Error;
use ctxasr_nn::{ParamStore, Tensor};
use serde_json::json;
use sha2::{Digest, Sha256};

fn store() -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("a.w", Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap())
        .unwrap();
    let b = s.add("a.b", Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
    s.set_frozen(b, true);
    s
}

/// Reads the container by the documented layout: magic, LE u32 version,
/// LE u64 manifest length, JSON manifest, LE f32 payload.
fn parse_by_hand(bytes: &[u8]) -> (u32, serde_json::Value, Vec<f32>) {
    assert_eq!(&bytes[..8], MAGIC);
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[20..20 + n]).unwrap();
    let payload = bytes[20 + n..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    (version, manifest, payload)
}

#[test]
fn byte_layout_matches_an_independent_reader() {
    let s = store();
    let bytes = encode(&s, "asr", json!({"k": 1}));
    let (version, manifest, payload) = parse_by_hand(&bytes);
    assert_eq!(version, FORMAT_VERSION);
    assert_eq!(manifest["kind"], "asr");
    assert_eq!(manifest["tensors"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["tensors"][1]["frozen"], true);
    assert_eq!(manifest["config"]["k"], 1);
    let expect: Vec<f32> = s.entries().iter().flat_map(|e| e.value.data().to_vec()).collect();
    assert_eq!(payload.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), expect.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    assert_eq!(manifest["payload_sha256"], hex::encode(Sha256::digest(&bytes[20 + n..])));
}

#[test]
fn round_trip_is_bit_exact_and_keeps_frozen_flags() {
    let s = store();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&path, &s, "asr", json!(null)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.entries().len(), 2);
    for (a, b) in s.entries().iter().zip(back.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.frozen, b.frozen);
        assert_eq!(a.value.shape(), b.value.shape());
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(encode(&back.params, "asr", json!(null)), std::fs::read(&path).unwrap());
}

#[test]
fn corruption_is_reported_with_distinct_codes() {
    let bytes = encode(&store(), "asr", json!(null));
    let code = |b: &[u8]| Error::from(decode(b).unwrap_err()).code();

    assert_eq!(code(&bytes[..bytes.len() - 3]), "checkpoint-checksum");
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert_eq!(code(&flipped), "checkpoint-checksum");
    let mut version = bytes.clone();
    version[8] = 9;
    assert_eq!(code(&version), "checkpoint-version");
    assert_eq!(code(b"NOTACKPT and more bytes"), "checkpoint-magic");
    assert_eq!(code(&bytes[..15]), "checkpoint-checksum");
}

#[test]
fn restoring_needs_matching_names_and_shapes() {
    let source = store();
    let mut same = store();
    same.get_mut(same.id("a.w").unwrap()).data_mut()[0] = 9.0;
    restore_into(&mut same, &source).unwrap();
    assert_eq!(same.get(same.id("a.w").unwrap()).data()[0], 1.5);

    let mut wide = ParamStore::<f32>::new();
    wide.add("a.w", Tensor::zeros(vec![2, 4])).unwrap();
    wide.add("a.b", Tensor::zeros(vec![1, 3])).unwrap();
    let e = Error::from(restore_into(&mut wide, &source).unwrap_err());
    assert_eq!(e.code(), "checkpoint-shape");
    assert!(e.to_string().contains("a.w"));

    let mut more = store();
    more.add("c", Tensor::zeros(vec![1, 1])).unwrap();
    assert_eq!(Error::from(restore_into(&mut more, &source).unwrap_err()).code(), "checkpoint-missing-tensor");
    let mut fewer = ParamStore::<f32>::new();
    fewer.add("a.w", Tensor::zeros(vec![2, 3])).unwrap();
    assert_eq!(Error::from(restore_into(&mut fewer, &source).unwrap_err()).code(), "checkpoint-unexpected-tensor");
}

#[test]
fn model_checkpoints_check_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AsrConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        encoder_blocks: 1,
        decoder_blocks: 1,
        context_dim: 8,
        ..AsrConfig::default()
    };
    let (model, params) = AsrModel::init(&cfg, 0).unwrap();
    let asr = TrainedAsr {
        model,
        params,
        mode: ContextMode::ConOne,
    };
    let path = dir.path().join("asr.ckpt");
    asr.save(&path).unwrap();
    let back = TrainedAsr::load(&path).unwrap();
    assert_eq!(back.mode, ContextMode::ConOne);
    assert_eq!(back.model.config, cfg);
    assert_eq!(load_checkpoint(&path).unwrap().manifest.kind, ASR_KIND);
    let e = TrainedExtractor::load(&path).err().unwrap();
    assert_eq!(e.code(), "checkpoint-kind");

    let (ext, ext_params) = Extractor::init(&ExtractorConfig::default(), 0).unwrap();
    let trained = TrainedExtractor {
        model: ext,
        params: ext_params,
    };
    let epath = dir.path().join("ext.ckpt");
    trained.save(&epath).unwrap();
    assert_eq!(load_checkpoint(&epath).unwrap().manifest.kind, EXTRACTOR_KIND);
    assert_eq!(TrainedAsr::load(&epath).err().unwrap().code(), "checkpoint-kind");
}
