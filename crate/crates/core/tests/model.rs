use bita_core::data::{collate, generate_synthetic_dataset, Image, ImageTextPair, SyntheticSpec};
use bita_core::model::{build_prefix_causal_mask, BitaModel, Forward, ModelConfig, ParamGroup, ParamId};
use bita_core::objectives::{itc_loss, pclm_loss, ItcConfig};
use bita_core::textproc::{build_vocab, Vocabulary};
use bita_core::{MixerKind, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STAGE1: [ParamGroup; 3] = [ParamGroup::Prompts, ParamGroup::Ift, ParamGroup::TextEmbedding];
const STAGE2: [ParamGroup; 3] = [ParamGroup::Prompts, ParamGroup::Ift, ParamGroup::Projection];

fn pairs(n: usize) -> Vec<ImageTextPair> {
    generate_synthetic_dataset(&SyntheticSpec::default(), n, 11).unwrap()
}

fn vocab_for(data: &[ImageTextPair]) -> Vocabulary {
    let caps: Vec<&str> = data.iter().flat_map(|p| p.captions.iter().map(String::as_str)).collect();
    build_vocab(&caps).unwrap()
}

fn model_with(f: impl FnOnce(&mut ModelConfig)) -> BitaModel {
    let mut cfg = ModelConfig::default();
    f(&mut cfg);
    BitaModel::new(cfg).unwrap()
}

#[test]
fn image_branch_emits_num_prompts_rows_for_any_patch_count() {
    let data = pairs(2);
    for patches in [4, 16, 64] {
        let model = model_with(|c| c.image_patches = patches);
        let mut f = Forward::new(&model, &STAGE1);
        let imgs: Vec<&Image> = data.iter().map(|p| &p.image).collect();
        let feats = f.image_features(&imgs).unwrap();
        assert_eq!(f.graph.shape(feats), &[2 * patches, 64]);
        let out = f.image_branch(feats, 2).unwrap();
        assert_eq!(f.graph.shape(out), &[2 * 32, 64]);
    }
}

#[test]
fn image_branch_ignores_feature_order() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let data = pairs(1);
    let feats = model.encode_images(&[&data[0].image]).unwrap();
    let run = |t: Tensor| {
        let mut f = Forward::new(&model, &[]);
        let v = f.graph.constant(t);
        let out = f.image_branch(v, 1).unwrap();
        f.graph.value(out).clone()
    };
    let base = run(feats.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = feats.rows();
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(&mut rng);
        let refs: Vec<&[f64]> = perm.iter().map(|&r| feats.row(r)).collect();
        let permuted = Tensor::from_rows(&refs).unwrap();
        assert!(run(permuted).max_abs_diff(&base) < 1e-9);
    }
}

#[test]
fn self_attention_mixer_changes_the_output() {
    let data = pairs(1);
    let outputs: Vec<Tensor> = [MixerKind::FourierMix, MixerKind::SelfAttention]
        .into_iter()
        .map(|mixer| {
            let model = model_with(|c| c.mixer = mixer);
            let mut f = Forward::new(&model, &[]);
            let feats = f.image_features(&[&data[0].image]).unwrap();
            let out = f.image_branch(feats, 1).unwrap();
            f.graph.value(out).clone()
        })
        .collect();
    assert!(outputs[0].max_abs_diff(&outputs[1]) > 1e-6);
}

fn cls_row(model: &BitaModel, ids: &[usize]) -> Tensor {
    let mut f = Forward::new(model, &[]);
    let out = f.text_branch(ids, 1).unwrap();
    let cls = f.cls_rows(out, 1).unwrap();
    f.graph.value(cls).clone()
}

#[test]
fn text_branch_is_deterministic_and_globally_mixed() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let mut ids = vec![Vocabulary::PAD; 16];
    ids[0] = Vocabulary::CLS;
    ids[1..5].copy_from_slice(&[5, 6, 7, 8]);
    let a = cls_row(&model, &ids);
    assert_eq!(a, cls_row(&model, &ids));
    for j in 1..16 {
        let mut other = ids.clone();
        other[j] = 9;
        assert!(cls_row(&model, &other).max_abs_diff(&a) > 1e-9, "position {j}");
    }
    ids[3] = 64;
    let mut f = Forward::new(&model, &[]);
    assert!(f.text_branch(&ids, 1).is_err());
}

#[test]
fn branches_share_ffn_and_norm_tensors() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let data = pairs(1);
    let mut ids = vec![Vocabulary::PAD; 16];
    ids[0] = Vocabulary::CLS;

    let bound_by = |which: u8| {
        let mut f = Forward::new(&model, &STAGE1);
        if which == 0 {
            let feats = f.image_features(&[&data[0].image]).unwrap();
            f.image_branch(feats, 1).unwrap();
        } else {
            f.text_branch(&ids, 1).unwrap();
        }
        f.bound_params().map(|(id, _)| id).collect::<Vec<ParamId>>()
    };
    let image = bound_by(0);
    let text = bound_by(1);
    for l in 0..model.config().num_layers {
        for id in model.shared_ffn_ids(l) {
            assert!(image.contains(&id) && text.contains(&id));
            assert!(model.params().name(id).contains(".ffn."));
        }
    }
    let cross: Vec<&ParamId> = image
        .iter()
        .filter(|id| model.params().name(**id).contains(".cross."))
        .collect();
    assert!(!cross.is_empty());
    assert!(cross.iter().all(|id| !text.contains(id)));
}

#[test]
fn projection_contracts() {
    let mut model = BitaModel::new(ModelConfig::default()).unwrap();
    let b = model.params().find("proj.b").unwrap();
    assert!(model.params().get(b).data().iter().all(|&v| v == 0.0));
    {
        let mut f = Forward::new(&model, &STAGE2);
        let z = f.graph.constant(Tensor::zeros(&[32, 64]));
        let out = f.project_to_lm(z).unwrap();
        assert_eq!(f.graph.shape(out), &[32, model.config().lm_dim]);
        assert!(f.graph.value(out).data().iter().all(|&v| v == 0.0));
        let bad = f.graph.constant(Tensor::zeros(&[32, 63]));
        assert!(f.project_to_lm(bad).is_err());
    }

    // finite differences on the projection weights
    let w = model.params().find("proj.w").unwrap();
    let z = Tensor::from_fn(&[4, 64], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
    let loss = |m: &BitaModel| {
        let mut f = Forward::new(m, &STAGE2);
        let zv = f.graph.constant(z.clone());
        let p = f.project_to_lm(zv).unwrap();
        let sq = f.graph.mul(p, p).unwrap();
        let l = f.graph.sum(sq);
        let wv = f.param(w);
        let grads = f.graph.backward(l).unwrap();
        (f.graph.value(l).data()[0], grads.wrt(wv))
    };
    let (_, analytic) = loss(&model);
    let h = 1e-5;
    for k in [0, 17, 300, 4095, 8191] {
        let orig = model.params().get(w).data()[k];
        model.params_mut().get_mut(w).data_mut()[k] = orig + h;
        let up = loss(&model).0;
        model.params_mut().get_mut(w).data_mut()[k] = orig - h;
        let down = loss(&model).0;
        model.params_mut().get_mut(w).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[k];
        assert!((a - numeric).abs() / a.abs().max(1.0) < 1e-4, "{k}: {a} vs {numeric}");
    }
}

fn lm_logits(model: &BitaModel, prefix: &Tensor, ids: &[usize]) -> Tensor {
    let mut f = Forward::new(model, &[]);
    let p = f.graph.constant(prefix.clone());
    let mask = build_prefix_causal_mask(prefix.rows(), ids.len());
    let out = f.lm_forward(Some(p), ids, 1, &mask).unwrap();
    f.graph.value(out).clone()
}

#[test]
fn lm_is_causal_over_text_and_sees_the_whole_prefix() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prefix = Tensor::from_fn(&[8, 128], |_| rng.gen_range(-1.0..1.0));
    let ids = [2, 7, 9, 11, 13, 3];
    let base = lm_logits(&model, &prefix, &ids);
    assert_eq!(base.shape(), &[6, 64]);
    for j in 0..ids.len() {
        let mut changed = ids;
        changed[j] = 20;
        let out = lm_logits(&model, &prefix, &changed);
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "token {j} leaked into position {i}");
        }
        assert!(out.row(j).iter().zip(base.row(j)).any(|(a, b)| a != b));
    }
    for r in 0..8 {
        let mut p = prefix.clone();
        p.row_mut(r)[0] += 0.5;
        let out = lm_logits(&model, &p, &ids);
        for i in 0..ids.len() {
            let d = out.row(i).iter().zip(base.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d > 1e-12, "prefix row {r} invisible at position {i}");
        }
    }
}

#[test]
fn lm_rejects_mismatched_mask() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let mut f = Forward::new(&model, &[]);
    let p = f.graph.constant(Tensor::zeros(&[4, 128]));
    let mask = build_prefix_causal_mask(3, 2);
    assert!(f.lm_forward(Some(p), &[5, 6], 1, &mask).is_err());
    let mask = build_prefix_causal_mask(4, 3);
    assert!(f.lm_forward(Some(p), &[5, 6], 1, &mask).is_err());
}

#[test]
fn later_tokens_never_influence_earlier_loss_terms() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let (p, t) = (4, 6);
    let mask = build_prefix_causal_mask(p, t);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = Tensor::from_fn(&[p + t, 128], |_| rng.gen_range(-0.5..0.5));
    let targets: Vec<usize> = (0..t).map(|i| 5 + i).collect();
    for i in 0..t {
        let mut f = Forward::new(&model, &[]);
        let x = f.graph.leaf(emb.clone(), true);
        let logits = f.lm_from_embeddings(x, 1, &mask).unwrap();
        let weights: Vec<f64> = (0..t).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
        let loss = f.graph.cross_entropy(logits, &targets, Some(&weights)).unwrap();
        let grads = f.graph.backward(loss).unwrap();
        let g = grads.wrt(x);
        for j in i + 1..t {
            let worst = g.row(p + j).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(worst < 1e-12, "d loss_{i} / d token_{j} = {worst}");
        }
        assert!(g.row(p + i).iter().any(|&v| v != 0.0));
    }
}

#[test]
fn frozen_parts_get_no_gradient() {
    let data = pairs(2);
    let vocab = vocab_for(&data);
    let model = BitaModel::new(ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })
    .unwrap();
    let caps: Vec<String> = data.iter().map(|p| p.captions[0].clone()).collect();
    let batch = collate(&[0, 1], &caps, &vocab, 16).unwrap();
    let mut f = Forward::new(&model, &STAGE2);
    let imgs: Vec<&Image> = data.iter().map(|p| &p.image).collect();
    let feats = f.image_features(&imgs).unwrap();
    let z = f.image_branch(feats, 2).unwrap();
    let prefix = f.project_to_lm(z).unwrap();
    let mask = build_prefix_causal_mask(32, batch.lm_len);
    let logits = f.lm_forward(Some(prefix), &batch.lm_inputs, 2, &mask).unwrap();
    let loss = pclm_loss(&mut f.graph, logits, &batch.lm_targets, 2, 0, Vocabulary::PAD).unwrap();
    let grads = f.graph.backward(loss).unwrap();
    let mut trainable_with_grad = 0;
    for (id, var) in f.bound_params() {
        let group = model.params().group(id);
        if group.is_frozen() {
            assert!(grads.get(var).is_none(), "{}", model.params().name(id));
        } else if grads.get(var).is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
            trainable_with_grad += 1;
        }
    }
    assert!(trainable_with_grad > 10);
}

#[test]
fn encoder_is_deterministic_and_finite() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let data = pairs(1);
    let a = model.encode_images(&[&data[0].image]).unwrap();
    assert_eq!(a, model.encode_images(&[&data[0].image]).unwrap());
    assert_eq!(a.shape(), &[16, 64]);
    let zero = Image::filled(32, 32, [0.0; 3]);
    assert!(model.encode_images(&[&zero]).unwrap().is_finite());
    let small = Image::filled(16, 16, [0.0; 3]);
    assert!(model.encode_images(&[&small]).is_err());
}

#[test]
fn batched_encoding_matches_single_images() {
    let model = BitaModel::new(ModelConfig::default()).unwrap();
    let data = pairs(3);
    let imgs: Vec<&Image> = data.iter().map(|p| &p.image).collect();
    let all = model.encode_images(&imgs).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let one = model.encode_images(&[img]).unwrap();
        for r in 0..16 {
            assert_eq!(all.row(i * 16 + r), one.row(r));
        }
    }
}

#[test]
fn self_attention_adds_four_projections_per_layer() {
    for layers in [1, 2, 4] {
        let fourier = model_with(|c| c.num_layers = layers);
        let attn = model_with(|c| {
            c.num_layers = layers;
            c.mixer = MixerKind::SelfAttention;
        });
        let d = 64;
        assert_eq!(
            attn.total_params(true) - fourier.total_params(true),
            layers * (4 * d * d + 4 * d)
        );
    }
    let one = model_with(|c| c.num_layers = 2).count_params(true);
    let two = model_with(|c| c.num_layers = 4).count_params(true);
    assert_eq!(two["ift"], 2 * one["ift"]);
    assert!(!one.contains_key("image_encoder") && !one.contains_key("language_model"));
    let all = model_with(|_| {}).count_params(false);
    assert!(all["image_encoder"] > 0 && all["language_model"] > 0);
}

#[test]
fn stage_one_gradient_matches_finite_differences() {
    let data = pairs(2);
    let vocab = vocab_for(&data);
    let mut model = BitaModel::new(ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })
    .unwrap();
    let caps: Vec<String> = data.iter().map(|p| p.captions[0].clone()).collect();
    let batch = collate(&[0, 1], &caps, &vocab, 16).unwrap();
    let feats = model
        .encode_images(&data.iter().map(|p| &p.image).collect::<Vec<_>>())
        .unwrap();
    let cfg = ItcConfig::default();
    let names = ["prompts", "ift.layer0.ffn.up.w", "ift.layer3.cross.k.w", "text.tok", "ift.layer1.ln_mix.gamma"];
    let ids: Vec<ParamId> = names.iter().map(|n| model.params().find(n).unwrap()).collect();

    let eval = |m: &BitaModel| {
        let mut f = Forward::new(m, &STAGE1);
        let fv = f.graph.constant(feats.clone());
        let z = f.image_branch(fv, 2).unwrap();
        let t = f.text_branch(&batch.text_ids, 2).unwrap();
        let cls = f.cls_rows(t, 2).unwrap();
        let out = itc_loss(&mut f.graph, z, cls, &cfg).unwrap();
        let grads = f.graph.backward(out.loss).unwrap();
        let per_param: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(f.param(id))).collect();
        (f.graph.value(out.loss).data()[0], per_param)
    };
    let (_, analytic) = eval(&model);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for (p, &id) in ids.iter().enumerate() {
        let n = model.params().get(id).len();
        let mut coords: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n)).collect();
        // coordinate with the largest gradient, so the check is not vacuous
        let top = analytic[p]
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        coords.push(top);
        for k in coords {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&model).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&model).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        assert!(analytic[p].data().iter().any(|&v| v != 0.0), "{}", names[p]);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
