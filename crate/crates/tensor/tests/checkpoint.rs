//! Round-trip and manifest-shape tests for the flat-binary checkpoint format.

use lifeseq_tensor::{load_params, save_params, ParamSet, Tensor};

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut params = ParamSet::new();
    params.add("layer0.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0]).expect("shape"), true);
    params.add("layer0.b", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]).expect("shape"), false);
    params.add("gate", Tensor::scalar(0.0), false);

    let dir = tempfile::tempdir().expect("tempdir");
    let extra = serde_json::json!({"seed": 42, "note": "round trip"});
    save_params(&params, dir.path(), &extra).expect("save");
    let (loaded, extra2) = load_params(dir.path()).expect("load");

    assert_eq!(extra, extra2);
    assert_eq!(loaded.len(), params.len());
    for ((_, a), (_, b)) in params.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.decay_eligible, b.decay_eligible);
        assert_eq!(a.value.shape(), b.value.shape());
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "parameter {} drifted", a.name);
        }
    }
}

#[test]
fn manifest_records_offsets_and_decay_flags() {
    let mut params = ParamSet::new();
    params.add("a", Tensor::zeros(2, 2), true);
    params.add("b", Tensor::zeros(1, 5), false);
    let dir = tempfile::tempdir().expect("tempdir");
    save_params(&params, dir.path(), &serde_json::Value::Null).expect("save");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).expect("read"))
            .expect("json");
    let tensors = manifest["tensors"].as_array().expect("tensor list");
    assert_eq!(tensors.len(), 2);
    assert_eq!(tensors[0]["name"], "a");
    assert_eq!(tensors[0]["offset_bytes"], 0);
    assert_eq!(tensors[0]["decay_eligible"], true);
    assert_eq!(tensors[1]["offset_bytes"], 32);
    assert_eq!(tensors[1]["decay_eligible"], false);

    let bin = std::fs::read(dir.path().join("params.bin")).expect("bin");
    assert_eq!(bin.len(), (4 + 5) * 8);
}
