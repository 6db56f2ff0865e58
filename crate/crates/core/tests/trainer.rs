use personalab::augment::default_augmentation_set;
use personalab::denoiser::DenoiserConfig;
use personalab::diffusion::gaussian_image;
use personalab::model::{default_vocabulary, BaseModel};
use personalab::persistence::Container;
use personalab::text::EncoderConfig;
use personalab::trainer::{linear_decay_lr, train, TrainConfig, TrainMode, Trainer};
use personalab::{assets, rng, Error, ImageTensor};

const D: usize = 8;

fn small_base() -> BaseModel {
    BaseModel::new(
        EncoderConfig {
            width: D,
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
        5,
    )
    .unwrap()
}

fn reference() -> ImageTensor {
    gaussian_image(&mut rng::stream(77, 0), (3, 8, 8)).map(f64::tanh)
}

fn cfg(mode: TrainMode, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        mode,
        ..TrainConfig::default()
    }
}

#[test]
fn token_learning_rate_decays_linearly() {
    assert_eq!(linear_decay_lr(1e-2, 0, 250), 1e-2);
    assert_eq!(linear_decay_lr(1e-2, 250, 250), 0.0);
    assert!((linear_decay_lr(1e-2, 125, 250) - 5e-3).abs() < 1e-18);

    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let out = Trainer::new(&cfg(TrainMode::TextEncoderOnly, 10), &base, &s, &reference(), "dog", &reg)
        .unwrap()
        .run(|_| {})
        .unwrap();
    assert_eq!(out.metrics.len(), 10);
    for (k, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step, k);
        assert!((m.lr_token - 1e-2 * (1.0 - k as f64 / 10.0)).abs() < 1e-15);
    }
}

#[test]
fn defaults_describe_the_text_only_run() {
    let c = TrainConfig::default();
    assert_eq!((c.steps, c.batch_size, c.lora_rank), (250, 8, 4));
    assert_eq!((c.lr_adapters, c.lr_tokens, c.weight_decay, c.clip_norm), (5e-3, 1e-2, 0.01, 1.0));
    assert_eq!(c.mode, TrainMode::TextEncoderOnly);
    let t = c.mode.trainable();
    assert!(t.tokens && t.adapters && !t.encoder && !t.denoiser);
}

#[test]
fn more_than_one_reference_is_rejected() {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let c = cfg(TrainMode::TextEncoderOnly, 1);
    for refs in [vec![], vec![reference(), reference()]] {
        assert!(matches!(train(&c, &refs, "dog", &reg, &base, &s), Err(Error::Argument(_))));
    }
    let wrong = ImageTensor::zeros(3, 16, 16);
    assert!(matches!(
        train(&c, &[wrong], "dog", &reg, &base, &s),
        Err(Error::Argument(_))
    ));
}

#[test]
fn each_mode_changes_exactly_its_declared_parameters() {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let before = base.to_snapshot("before");
    for mode in TrainMode::ALL {
        let out = train(&cfg(mode, 3), &[reference()], "dog", &reg, &base, &s).unwrap();
        let after = out.effective_snapshot(&base).unwrap();
        let changed = before.tensors.changed_names(&after.tensors);
        let t = mode.trainable();
        let enc_changed = changed.iter().filter(|n| n.starts_with("encoder.")).count();
        let den_changed = changed.iter().filter(|n| n.starts_with("denoiser.")).count();
        assert_eq!(enc_changed > 0, t.encoder || t.adapters, "{mode}: {changed:?}");
        assert_eq!(den_changed > 0, t.denoiser, "{mode}: {changed:?}");
        if t.denoiser {
            assert_eq!(den_changed, base.denoiser.params().len(), "{mode}");
        }
        if !t.encoder {
            assert_eq!(out.encoder.params().content_hash(), base.encoder.params().content_hash(), "{mode}");
        }
        let v = out.encoder.registry().lookup("v*").unwrap().id;
        let dog = base.encoder.vocab().id("dog").unwrap();
        assert_eq!(out.encoder.embedding_row(v) != base.encoder.embedding_row(dog), t.tokens, "{mode}");
    }
}

#[test]
fn trainable_count_is_adapters_plus_learned_rows() {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let tr = Trainer::new(&cfg(TrainMode::TextEncoderOnly, 1), &base, &s, &reference(), "dog", &reg).unwrap();
    // Per layer: q, k, v, out are d→d; fc1 is d→2d and fc2 2d→d.
    let r = 4;
    let per_layer = 4 * r * (D + D) + 2 * r * (D + 2 * D);
    // Every variant of a spec gets its own group of placeholder rows.
    let tokens: usize = 1 + default_augmentation_set()
        .iter()
        .map(|a| a.variants.len() * a.token_count)
        .sum::<usize>();
    assert_eq!(tokens, 20);
    assert_eq!(tr.trainable_params(), per_layer + tokens * D);

    let no_aug = Trainer::new(&cfg(TrainMode::NoAug, 1), &base, &s, &reference(), "dog", &reg).unwrap();
    assert_eq!(no_aug.trainable_params(), per_layer + D);
}

fn checkpoint_bytes(mode: TrainMode, seed: u64) -> Vec<u8> {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let c = TrainConfig {
        seed,
        ..cfg(mode, 4)
    };
    train(&c, &[reference()], "dog", &reg, &base, &s)
        .unwrap()
        .checkpoint()
        .to_bytes()
}

#[test]
fn same_seed_same_checkpoint() {
    assert_eq!(checkpoint_bytes(TrainMode::TextEncoderOnly, 3), checkpoint_bytes(TrainMode::TextEncoderOnly, 3));
    assert_ne!(checkpoint_bytes(TrainMode::TextEncoderOnly, 3), checkpoint_bytes(TrainMode::TextEncoderOnly, 4));
}

#[test]
fn resuming_from_saved_state_is_bitwise_identical() {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    for mode in [TrainMode::TextEncoderOnly, TrainMode::FullFinetune] {
        let c = cfg(mode, 6);
        let straight = Trainer::new(&c, &base, &s, &reference(), "dog", &reg).unwrap().run(|_| {}).unwrap();

        let mut first = Trainer::new(&c, &base, &s, &reference(), "dog", &reg).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let state = Container::from_bytes(&first.save_state().to_bytes()).unwrap();
        drop(first);
        let mut second = Trainer::new(&c, &base, &s, &reference(), "dog", &reg).unwrap();
        second.restore_state(&state).unwrap();
        assert_eq!(second.step_index(), 3);
        let resumed = second.run(|_| {}).unwrap();

        assert_eq!(resumed.metrics, straight.metrics, "{mode}");
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes(), "{mode}");
        assert_eq!(
            resumed.effective_snapshot(&base).unwrap().to_bytes(),
            straight.effective_snapshot(&base).unwrap().to_bytes(),
            "{mode}"
        );

        let other = TrainConfig { seed: 9, ..c };
        let mut wrong = Trainer::new(&other, &base, &s, &reference(), "dog", &reg).unwrap();
        assert!(matches!(wrong.restore_state(&state), Err(Error::Config(_))));
    }
}

#[test]
fn stepping_past_the_end_is_an_error() {
    let base = small_base();
    let s = assets::default_schedule();
    let reg = assets::reg_prompts();
    let mut tr = Trainer::new(&cfg(TrainMode::NoKpl, 1), &base, &s, &reference(), "dog", &reg).unwrap();
    let m = tr.step().unwrap();
    assert_eq!(m.kp, 0.0);
    assert!(tr.is_done());
    assert!(matches!(tr.step(), Err(Error::Argument(_))));
}
