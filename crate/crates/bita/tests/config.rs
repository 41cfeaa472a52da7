use bita::config::{RunConfig, SEED_ENV};
use bita::BitaError;
use bita_core::objectives::SimilarityPooling;
use bita_core::train::Stage;
use bita_core::MixerKind;

const TEXT: &str = "
# comment line
hidden_dim = 32      # trailing comment
mixer = self-attn
seed = 9
data_seed = 4
pooling = mean
augment = false
max_steps = 50
grad_clip = none
lr_peak = 3e-3
s2.lr_peak = 1e-3
ft.batch_size = 8
";

#[test]
fn keys_comments_and_order() {
    let c = RunConfig::parse(TEXT, Some(Stage::Stage1)).unwrap();
    assert_eq!(c.model.hidden_dim, 32);
    assert_eq!(c.model.mixer, MixerKind::SelfAttention);
    assert_eq!(c.model.seed, 9);
    assert_eq!(c.train.augment_seed, 9);
    assert_eq!(c.train.data_seed, 4);
    assert_eq!(c.train.itc.pooling, SimilarityPooling::MeanOverPrompts);
    assert!(!c.train.augment);
    assert_eq!(c.train.max_steps, Some(50));
    assert_eq!(c.train.grad_clip, None);
    assert_eq!(c.schedule.lr_peak, Some(3e-3));
    assert_eq!(c.train.batch_size, 16);
}

#[test]
fn stage_prefixes_apply_to_their_stage_only() {
    let s2 = RunConfig::parse(TEXT, Some(Stage::Stage2)).unwrap();
    assert_eq!(s2.schedule.lr_peak, Some(1e-3));
    let ft = RunConfig::parse(TEXT, Some(Stage::Finetune)).unwrap();
    assert_eq!(ft.train.batch_size, 8);
    assert_eq!(ft.schedule.lr_peak, Some(3e-3));
}

#[test]
fn errors_name_the_line() {
    for (text, line) in [
        ("hidden_dim = 8\nbogus = 1\n", 2),
        ("\n\nhidden_dim 8\n", 3),
        ("mixer = conv\n", 1),
        ("xx.lr_peak = 1\n", 1),
        ("s1.nonsense = 1\n", 1),
        ("augment = yes\n", 1),
    ] {
        match RunConfig::parse(text, None).unwrap_err() {
            BitaError::Config { line: l, .. } => assert_eq!(l, line, "{text:?}"),
            e => panic!("{e}"),
        }
    }
}

#[test]
fn schedule_follows_run_length_with_overrides() {
    let c = RunConfig::parse("max_steps = 40\nwarmup_steps = 4\nlr_peak = 1e-3\n", Some(Stage::Stage1)).unwrap();
    let t = c.train_config(Stage::Stage1, 640);
    let s = t.schedule.unwrap();
    assert_eq!((s.total_steps, s.warmup_steps, s.lr_peak, s.lr_start), (40, 4, 1e-3, 1e-6));
    let plain = RunConfig::default().train_config(Stage::Finetune, 64 * 1000);
    let s = plain.schedule.unwrap();
    assert_eq!((s.warmup_steps, s.lr_start, s.lr_peak, s.lr_min), (2000, 1e-8, 1e-5, 0.0));
}

#[test]
fn hash_tracks_content() {
    let a = RunConfig::parse("hidden_dim = 32\n", None).unwrap();
    let b = RunConfig::parse("# same\nhidden_dim=32", None).unwrap();
    let c = RunConfig::parse("hidden_dim = 16\n", None).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn seed_variable_overrides_the_file() {
    // the only test in this binary that touches the environment
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    std::fs::write(&p, "seed = 3\n").unwrap();
    std::env::set_var(SEED_ENV, "77");
    let c = RunConfig::load(Some(&p), None).unwrap();
    std::env::set_var(SEED_ENV, "x");
    let bad = RunConfig::load(Some(&p), None);
    std::env::remove_var(SEED_ENV);
    assert_eq!((c.model.seed, c.train.data_seed, c.train.augment_seed), (77, 77, 77));
    assert!(bad.is_err());
    assert_eq!(RunConfig::load(Some(&p), None).unwrap().model.seed, 3);
}
