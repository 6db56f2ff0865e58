use personalab::denoiser::DenoiserConfig;
use personalab::diffusion::gaussian_image;
use personalab::model::{default_vocabulary, BaseModel};
use personalab::persistence::{
    apply_checkpoint, load, read_header, save, CheckpointError, Container, ContainerKind, DType, Header,
};
use personalab::text::EncoderConfig;
use personalab::trainer::{train, TrainConfig};
use personalab::{assets, rng, Error, Tensor};
use proptest::prelude::*;

fn small_base(width: usize) -> BaseModel {
    BaseModel::new(
        EncoderConfig {
            width,
            layers: 1,
            heads: 2,
            max_len: 16,
            mlp_ratio: 2,
        },
        DenoiserConfig {
            channels: 3,
            image_size: 8,
            patch: 4,
            width: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            cond_dim: 8,
        },
        default_vocabulary(),
        2,
    )
    .unwrap()
}

fn trained_checkpoint(base: &BaseModel) -> Container {
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let img = gaussian_image(&mut rng::stream(1, 0), (3, 8, 8)).map(f64::tanh);
    train(&cfg, &[img], "dog", &assets::reg_prompts(), base, &assets::default_schedule())
        .unwrap()
        .checkpoint()
}

/// Re-encodes a file with an edited header.
fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let mut h: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
    edit(&mut h);
    let text = serde_json::to_vec(&h).unwrap();
    let mut out = (text.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + hlen..]);
    out
}

fn ckpt_err(bytes: &[u8]) -> CheckpointError {
    Container::from_bytes(bytes).unwrap_err()
}

#[test]
fn truncated_payload_is_reported() {
    let bytes = trained_checkpoint(&small_base(8)).to_bytes();
    let err = ckpt_err(&bytes[..bytes.len() - 3]);
    assert!(matches!(err, CheckpointError::TruncatedPayload { .. }), "{err}");
    assert!(matches!(ckpt_err(&bytes[..5]), CheckpointError::CorruptHeader(_)));
}

#[test]
fn header_edits_are_detected() {
    let bytes = trained_checkpoint(&small_base(8)).to_bytes();
    assert!(Container::from_bytes(&with_header(&bytes, |_| {})).is_ok());

    let past_end = with_header(&bytes, |h| {
        let p = h["payload_length"].as_u64().unwrap();
        h["tensors"][0]["offset"] = (p + 4).into();
    });
    assert!(matches!(ckpt_err(&past_end), CheckpointError::RangeOutOfBounds { .. }));

    let overlap = with_header(&bytes, |h| {
        let off = h["tensors"][0]["offset"].clone();
        h["tensors"][1]["offset"] = off;
    });
    assert!(matches!(ckpt_err(&overlap), CheckpointError::OverlappingRanges(..)));

    let version = with_header(&bytes, |h| h["format_version"] = 99.into());
    assert!(matches!(ckpt_err(&version), CheckpointError::UnsupportedVersion(99)));

    let missing_token = with_header(&bytes, |h| h["tokens"][0]["tensor"] = "token.nothing".into());
    assert!(matches!(ckpt_err(&missing_token), CheckpointError::CorruptHeader(_)));

    let mut garbage = bytes.clone();
    garbage[8] = b'#';
    assert!(matches!(ckpt_err(&garbage), CheckpointError::CorruptHeader(_)));

    let mut huge = bytes.clone();
    huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(ckpt_err(&huge), CheckpointError::CorruptHeader(_)));
}

#[test]
fn checkpoint_holds_only_adapters_and_tokens() {
    let base = small_base(8);
    let c = trained_checkpoint(&base);
    let bytes = c.to_bytes();
    let header: Header = read_header(&bytes).unwrap();
    assert_eq!(header.kind, ContainerKind::Checkpoint);
    assert!(header.tensors.iter().all(|e| e.dtype == DType::F32));
    assert!(header
        .tensors
        .iter()
        .all(|e| e.name.starts_with("lora.") || e.name.starts_with("token.")));
    assert_eq!(header.tokens[0].token, "v*");
    let names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    for t in &header.tokens {
        assert!(names.contains(&t.tensor.as_str()));
    }
    // Payload is exactly the sum of the tensor byte lengths.
    let sum: u64 = header.tensors.iter().map(|e| e.length).sum();
    assert_eq!(sum, header.payload_length);
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    assert_eq!(bytes.len() as u64, 8 + hlen + sum);
}

#[test]
fn tokens_are_unknown_until_the_checkpoint_is_applied() {
    let base = small_base(8);
    let c = trained_checkpoint(&base);
    assert!(matches!(base.encoder.tokenize("a photo of v*"), Err(Error::UnknownToken(_))));
    let (enc, lora) = apply_checkpoint(&base.encoder, &c).unwrap();
    let (again, lora2) = apply_checkpoint(&base.encoder, &c).unwrap();
    let p = "a photo of v* with background";
    let a = enc.encode_text(Some(&lora), p).unwrap();
    assert_eq!(a, again.encode_text(Some(&lora2), p).unwrap());
    assert_eq!(enc.registry().tokens().len(), c.tokens.len());
    // The base encoder itself is untouched.
    assert!(base.encoder.tokenize("v*").is_err());
}

#[test]
fn applying_to_another_architecture_fails() {
    let c = trained_checkpoint(&small_base(8));
    let wide = small_base(16);
    let err = apply_checkpoint(&wide.encoder, &c).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(CheckpointError::ArchitectureMismatch { .. })),
        "{err}"
    );
    let snap = small_base(8).to_snapshot("x");
    assert!(matches!(
        apply_checkpoint(&small_base(8).encoder, &snap),
        Err(Error::Checkpoint(CheckpointError::WrongKind { .. }))
    ));
}

#[test]
fn save_then_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained_checkpoint(&small_base(8));
    let path = dir.path().join("ckpt.plab");
    save(&c, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn golden_checkpoint_still_loads() {
    let path = assets::fixtures_dir().join("golden.plab");
    let bytes = std::fs::read(&path).unwrap();
    let c = Container::from_bytes(&bytes).unwrap();
    assert_eq!(c.to_bytes(), bytes);
    let base = assets::base_model().unwrap();
    let (enc, lora) = apply_checkpoint(&base.encoder, &c).unwrap();
    let e = enc.encode_text(Some(&lora), "a photo of v*").unwrap();
    assert!(e.data().iter().all(|v| v.is_finite()));
}

fn container(dtype: DType) -> impl Strategy<Value = Container> {
    prop::collection::vec((1usize..4, 1usize..5, any::<u64>()), 1..6).prop_map(move |shapes| {
        let mut c = Container::new(ContainerKind::Snapshot, dtype, "p");
        for (i, (r, k, seed)) in shapes.into_iter().enumerate() {
            let t = gaussian_image(&mut rng::stream(seed, 0), (1, r, k)).map(|v| v * 1e3);
            c.tensors.insert(format!("t{i}"), Tensor::from_vec(r, k, t.data().to_vec()));
        }
        c
    })
}

proptest! {
    #[test]
    fn f64_containers_round_trip_exactly(c in container(DType::F64)) {
        prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn f32_containers_round_trip_through_one_rounding(c in container(DType::F32)) {
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        for (name, t) in c.tensors.iter() {
            let u = back.tensors.expect(name);
            for (x, y) in t.data().iter().zip(u.data()) {
                prop_assert_eq!(*y, *x as f32 as f64);
            }
        }
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }
}
