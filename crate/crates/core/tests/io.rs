use exmvit::config::{self, Overrides};
use exmvit::io::weights::{self, HeadKind};
use exmvit::io::{decode_pnm, encode_ppm, load_image, write_features};
use exmvit::params::ParamRole;
use exmvit::{Error, ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(name: &str, seed: u64) -> ModelGraph {
    let cfg = config::resolve_variant(name, &Overrides::default()).unwrap();
    if name.starts_with("mobilevit-s") {
        ModelGraph::build_baseline(&cfg, Some(seed)).unwrap()
    } else {
        ModelGraph::build(&cfg, seed).unwrap()
    }
}

fn image(seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![2, 3, size, size], |_| rng.random_range(0.0f32..1.0))
}

fn perturb_running_stats(model: &mut ModelGraph) {
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        if matches!(store.entry(id).role, ParamRole::RunningMean | ParamRole::RunningVar) {
            for (i, v) in store.tensor_mut(id).data_mut().iter_mut().enumerate() {
                *v += 0.01 * (i % 7) as f32;
            }
        }
    }
}

#[test]
fn save_load_preserves_every_bit_and_the_logits() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["exmvit-928-tiny", "mobilevit-s-tiny"] {
        let mut model = tiny(name, 11);
        perturb_running_stats(&mut model);
        let path = dir.path().join(format!("{name}.exvt"));
        weights::save(&model, &path).unwrap();
        let back = weights::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.seed(), Some(11));
        for id in model.params().ids() {
            let (a, b) = (model.params().tensor(id), back.params().tensor(id));
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{}", model.params().entry(id).name);
        }
        let x = image(1, 64);
        assert_eq!(model.infer(&x).unwrap().logits, back.infer(&x).unwrap().logits);
    }
}

#[test]
fn head_kind_is_recorded() {
    let a = weights::decode(&weights::encode(&tiny("exmvit-640-tiny", 0))).unwrap();
    let b = weights::decode(&weights::encode(&tiny("mobilevit-s-tiny", 0))).unwrap();
    assert_eq!(a.meta.head, HeadKind::Exshortcut);
    assert_eq!(b.meta.head, HeadKind::Baseline);
}

#[test]
fn running_statistics_are_stored() {
    let model = tiny("exmvit-576-tiny", 0);
    let file = weights::decode(&weights::encode(&model)).unwrap();
    assert_eq!(file.tensors.len(), model.params().len());
    assert!(file.tensors.iter().any(|(n, _)| n.ends_with("running_var")));
}

fn parse_offset(e: Error) -> usize {
    match e {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn corrupt_files_report_offsets() {
    let bytes = weights::encode(&tiny("exmvit-640-tiny", 0));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(parse_offset(weights::decode(&bad).unwrap_err()), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(parse_offset(weights::decode(&bad).unwrap_err()), 4);
    let cut = bytes.len() - 3;
    assert!(parse_offset(weights::decode(&bytes[..cut]).unwrap_err()) <= cut);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(parse_offset(weights::decode(&long).unwrap_err()), bytes.len());
    assert!(weights::decode(&[]).is_err());
}

#[test]
fn mismatched_tensors_are_rejected() {
    let file = weights::decode(&weights::encode(&tiny("exmvit-640-tiny", 0))).unwrap();
    let mut model = tiny("exmvit-640-tiny", 1);

    let mut renamed = file.tensors.clone();
    renamed[3].0 = "nope".into();
    assert!(matches!(weights::apply(&mut model, &renamed), Err(Error::WeightsMismatch(_))));

    let mut reshaped = file.tensors.clone();
    let n = reshaped[0].1.numel();
    reshaped[0].1 = Tensor::zeros(vec![n]);
    assert!(matches!(weights::apply(&mut model, &reshaped), Err(Error::WeightsMismatch(_))));

    assert!(matches!(weights::apply(&mut model, &file.tensors[1..]), Err(Error::WeightsMismatch(_))));
    let mut other = tiny("exmvit-928-tiny", 0);
    assert!(weights::apply(&mut other, &file.tensors).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(weights::load("/nonexistent/x.exvt"), Err(Error::Io { .. })));
}

#[test]
fn ppm_round_trip_and_resize() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (5, 3);
    let data: Vec<f32> = (0..3 * w * h).map(|i| (i * 7 % 256) as f32 / 255.0).collect();
    let bytes = encode_ppm(w, h, &data);
    let img = decode_pnm(&bytes).unwrap();
    let t = img.to_tensor();
    assert_eq!(t.shape(), &[1, 3, h, w]);
    assert_eq!(t.data(), &data[..]);

    let path = dir.path().join("x.ppm");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_image(&path, 32).unwrap().shape(), &[1, 3, 32, 32]);
}

#[test]
fn pgm_with_comments_becomes_three_channels() {
    let bytes = b"P5\n# comment\n2 1\n255\n\x00\xff";
    let t = decode_pnm(bytes).unwrap().to_tensor();
    assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn malformed_images_are_parse_errors() {
    assert_eq!(parse_offset(decode_pnm(b"P3\n1 1\n255\n0 0 0").unwrap_err()), 0);
    assert!(matches!(decode_pnm(b"P6\n2 2\n255\n\x00"), Err(Error::Parse { .. })));
    assert!(matches!(decode_pnm(b"P6\nx"), Err(Error::Parse { .. })));
}

#[test]
fn feature_dump_writes_raw_data_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let t = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f32);
    write_features(&path, &t, Some(3), "exmvit-928-tiny").unwrap();
    let raw = std::fs::read(&path).unwrap();
    let back: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(back, t.data());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.bin.json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([1, 2, 2, 2]));
    assert_eq!(side["block"], 3);
}
