mod common;

use std::time::Instant;

use wagf::checkpoint::{encode, load_checkpoint, save_checkpoint, CheckpointMeta};
use wagf::model::{Model, ModelConfig};
use wagf::Tensor;

/// Bytes predicted from the layout: header, two length-prefixed JSON blobs,
/// a tensor count, then per tensor a name, rank, dims and f32 payload.
fn expected_size(model: &Model<f32>, config_json: usize, meta_json: usize) -> usize {
    let tensor =
        |name: &str, shape: &[usize]| 4 + name.len() + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>();
    let fusion_shape = model.config().feature_shape();
    8 + 4
        + config_json
        + 4
        + meta_json
        + 4
        + model
            .params()
            .iter()
            .map(|p| tensor(&p.name, p.value.shape()))
            .sum::<usize>()
        + tensor("fusion.g_w_ema", &fusion_shape)
        + tensor("fusion.g_sa_ema", &fusion_shape)
}

#[test]
fn default_checkpoint_size_and_load_time() {
    let model = Model::<f32>::new(ModelConfig::default()).unwrap();
    let fusion = model.fresh_fusion_state(0.9).unwrap();
    let meta = CheckpointMeta::default();
    let bytes = encode(&model, &fusion, &meta);
    let config_json = serde_json::to_vec(model.config()).unwrap().len();
    let mut stored_meta = meta.clone();
    stored_meta.fusion_decay = 0.8999999761581421;
    let meta_json = serde_json::to_vec(&stored_meta).unwrap().len();
    assert_eq!(bytes.len(), expected_size(&model, config_json, meta_json));
    let scalars = model.params().scalar_count();
    let fusion_bytes = 2 * 4 * fusion.g_w_ema.len();
    let overhead = bytes.len() - 4 * scalars - fusion_bytes;
    assert!(
        overhead < 16_384,
        "{overhead} bytes of framing for {scalars} parameters"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &fusion, &meta).unwrap();
    let start = Instant::now();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(loaded.model, model);
}

#[test]
fn reloaded_model_gives_identical_outputs() {
    let mut model = Model::<f32>::new(ModelConfig {
        input_size: [32, 32, 3],
        backbone: vec![8, 16],
        feature_channels: 16,
        safa_filters: [16, 8],
        ..ModelConfig::default()
    })
    .unwrap();
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        p.value = p.value.map(|v| v + 0.01 * ((i % 7) as f32 - 3.0));
    }
    let mut fusion = model.fresh_fusion_state(0.9).unwrap();
    let g = Tensor::from_fn(&[8, 8, 16], |i| (i as f32 * 0.37).cos());
    fusion.update(&g, &g.map(|v| v * v)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &fusion, &CheckpointMeta::default()).unwrap();
    let ck = load_checkpoint::<f32>(&path).unwrap();
    let img = Tensor::from_fn(&[32, 32, 3], |i| ((i * 31) % 97) as f32 / 97.0);
    let (a, ta) = model.predict(&img, &fusion).unwrap();
    let (b, tb) = ck.model.predict(&img, &ck.fusion).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ta, tb);
}

#[test]
fn gate_never_amplifies_fused_features() {
    for seed in 0..20 {
        let mut model = Model::<f64>::new(common::tiny_config(seed)).unwrap();
        common::perturb(model.params_mut(), seed + 100);
        let fusion = model.fresh_fusion_state(0.9).unwrap();
        let img = common::random_tensor(&[16, 16, 3], seed + 200, 1.0, 0.0).map(|v| v.abs());
        let (_, t) = model.predict(&img, &fusion).unwrap();
        let fused = t.f_fuse.unwrap();
        for (f, u) in t.f_final.data().iter().zip(fused.data()) {
            assert!(f.abs() <= u.abs());
        }
    }
}
