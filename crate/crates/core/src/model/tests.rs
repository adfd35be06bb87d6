use super::*;
use crate::cache_sharing::Strategy;
use crate::numerics::{grad_check, grad_check_extended, Tensor};

fn toy(strategy: Strategy) -> Model {
    build_model(&ModelConfig::toy(strategy), 1).unwrap()
}

/// Hand count for the toy shapes: V=16, d=16, f=16, H_kv·D=16 (8 under GQA), D=4.
fn expected_toy_params(strategy: Strategy) -> usize {
    let shared = 2 * 16 * 16 + 16;
    let per_layer = 2 * 16 + 2 * 256 + 2 * 16 * 16 + 16 * 16;
    let kv = |width: usize, layers: usize| layers * 2 * 16 * width;
    let base = shared + 4 * per_layer;
    match strategy {
        Strategy::Vanilla => base + kv(16, 4),
        Strategy::Gqa => base + kv(8, 4),
        Strategy::Cla | Strategy::Yoco | Strategy::FusedKvLite | Strategy::FusedKvLiteRev => base + kv(16, 2),
        // two targets × two sources × (2 key pairs + 4 value channels)
        Strategy::FusedKv => base + kv(16, 2) + 2 * 2 * (2 + 4),
        Strategy::FusedKvLiteLearnable => base + kv(16, 2) + 2 * (2 + 4),
        Strategy::DenseFusion => base + kv(16, 2) + 2 * 2 * 2,
        Strategy::SourceIndex { .. } => unreachable!(),
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for s in Strategy::CATALOG {
        let m = toy(s);
        assert_eq!(m.num_params(), expected_toy_params(s), "{s}");
        assert_eq!(m.num_params(), m.config().param_count().unwrap(), "{s}");
    }
}

#[test]
fn reconstruction_layers_have_no_kv_projections() {
    let m = toy(Strategy::FusedKv);
    for layer in 1..=4 {
        let (_, k, v) = m.qkv_param_indices(layer).unwrap();
        assert_eq!(k.is_some(), layer <= 2);
        assert_eq!(v.is_some(), layer <= 2);
    }
    let fused: Vec<_> = m.param_names().iter().filter(|n| n.starts_with("fusion.")).collect();
    assert_eq!(fused.len(), 8);
    assert_eq!(m.param("fusion.key.3.1").unwrap().shape(), &[2]);
    assert_eq!(m.param("fusion.value.4.2").unwrap().shape(), &[4]);
}

#[test]
fn same_seed_same_weights() {
    let a = toy(Strategy::FusedKv);
    let b = toy(Strategy::FusedKv);
    assert_eq!(a.params(), b.params());
    let c: Model = build_model(&ModelConfig::toy(Strategy::FusedKv), 2).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn initial_loss_is_near_uniform() {
    let m: Model = build_model(&ModelConfig::desk(Strategy::Vanilla), 0).unwrap();
    let batch: Vec<Vec<usize>> = (0..4).map(|b| (0..32).map(|t| (t * 7 + b * 3) % 64).collect()).collect();
    let loss = forward_loss(&m, &batch).unwrap();
    let uniform = 64f64.ln();
    assert!((loss - uniform).abs() < 0.15 * uniform, "loss {loss}");
}

#[test]
fn degenerate_batches_are_errors() {
    let m = toy(Strategy::Vanilla);
    assert!(forward_loss(&m, &[]).is_err());
    assert!(forward_loss(&m, &[vec![3]]).is_err());
    assert!(forward_loss(&m, &[vec![3, 16]]).is_err());
    assert!(forward_loss(&m, &[vec![1; 65]]).is_err());
}

#[test]
fn two_layer_gradient_check() {
    let cfg = ModelConfig {
        num_layers: 2,
        middle: 1,
        init_std: 0.3,
        ..ModelConfig::toy(Strategy::FusedKvLite)
    };
    let m: Model = build_model(&cfg, 3).unwrap();
    let examples = [Example::dense(vec![1, 5, 2, 7])];
    let check = grad_check(|tape, vars| Ok(m.trace_with(tape, vars, &examples)?.loss), m.params(), 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-3, "{}", check.max_rel_err);
    let objective = LossObjective { model: &m, examples: &examples };
    let check = grad_check_extended(&objective, m.params(), 1e-6).unwrap();
    assert!(check.max_rel_err < 1e-4, "{}", check.max_rel_err);
}

#[test]
fn cached_decode_matches_recompute() {
    for s in [Strategy::Vanilla, Strategy::FusedKv, Strategy::Cla] {
        let m = toy(s);
        let prompt = [1, 4, 9, 2, 2, 7];
        let out = decode(&m, &prompt, 5).unwrap();
        let mut seq = prompt.to_vec();
        seq.extend(&out.tokens[..4]);
        let full = m.tape_logits(&seq).unwrap();
        for (k, row) in out.step_logits.iter().enumerate() {
            let reference = full.row(prompt.len() - 1 + k);
            let diff = row.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{s} step {k}: {diff}");
        }
    }
}

#[test]
fn zero_new_tokens_only_prefills() {
    let m = toy(Strategy::Yoco);
    let out = decode(&m, &[1, 2, 3], 0).unwrap();
    assert!(out.tokens.is_empty() && out.step_logits.is_empty());
    assert_eq!(out.prompt_logits.shape(), &[3, 16]);
    // two storage layers, 4 KV heads of dim 4, keys and values
    assert_eq!(out.peak_cache_elements, 2 * 2 * 4 * 3 * 4);
    assert!(decode(&m, &[1; 60], 5).is_err());
}

#[test]
fn dense_fusion_heatmap_reads_stored_scalars() {
    let m = toy(Strategy::DenseFusion);
    let h = fusion_weight_heatmap(&m).unwrap();
    assert_eq!(h.targets, vec![3, 4]);
    assert_eq!(h.sources, vec![1, 2]);
    for (r, &i) in h.targets.iter().enumerate() {
        for (c, &j) in h.sources.iter().enumerate() {
            assert_eq!(h.key[r][c], m.param(&format!("fusion.key.{i}.{j}")).unwrap().data()[0]);
            assert_eq!(h.value[r][c], m.param(&format!("fusion.value.{i}.{j}")).unwrap().data()[0]);
        }
    }
    assert!(fusion_weight_heatmap(&toy(Strategy::Yoco)).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let m = toy(Strategy::FusedKv);
    let bytes = m.to_bytes().unwrap();
    let back: Model = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.config(), m.config());
    assert!(Model::<f32>::from_bytes(&bytes).is_err());
    assert!(Model::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        batch_size: 2,
        seq_len: 9,
        ..TrainConfig::new(Task::Copy, 5)
    };
    let run = || {
        let mut m = toy(Strategy::FusedKvLite);
        train(&mut m, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.grad_norms.len(), 2 * 4);
    for g in &a.grad_norms {
        assert_eq!(g.k.is_some(), g.layer <= 2);
    }
}

#[test]
fn equivalent_init_only_for_fusedkv() {
    let mut cfg = ModelConfig::toy(Strategy::FusedKv);
    cfg.init = InitScheme::Equivalent;
    assert!(build_model::<f64>(&cfg, 0).is_ok());
    cfg.strategy = Strategy::DenseFusion;
    assert!(build_model::<f64>(&cfg, 0).is_err());
}

#[test]
fn single_precision_decode_tracks_double() {
    let m64 = toy(Strategy::FusedKv);
    let mut m32: Model<f32> = build_model(&ModelConfig::toy(Strategy::FusedKv), 1).unwrap();
    m32.set_params(m64.params().iter().map(Tensor::cast).collect()).unwrap();
    let a = m64.logits(&[1, 2, 3, 4]).unwrap();
    let b = m32.logits(&[1, 2, 3, 4]).unwrap().cast::<f64>();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
}
