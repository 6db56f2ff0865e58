use personalab::augment::{
    apply, default_augmentation_set, draw, grayscale, hflip, transform_image, vflip, AugKind, Placement, IDENTITY,
};
use personalab::diffusion::gaussian_image;
use personalab::{rng, Error, ImageTensor};
use proptest::prelude::*;

fn image(seed: u64) -> ImageTensor {
    gaussian_image(&mut rng::stream(seed, 0), (3, 16, 16)).map(f64::tanh)
}

fn placeholders(prompt: &str) -> usize {
    prompt.split(' ').filter(|w| w.starts_with("<aug:")).count()
}

#[test]
fn default_set_matches_table() {
    let set = default_augmentation_set();
    assert_eq!(set.len(), 9);
    let counts: Vec<(AugKind, usize)> = set.iter().map(|s| (s.kind, s.token_count)).collect();
    use AugKind::*;
    assert_eq!(
        counts,
        [
            (HorizontalFlip, 1),
            (VerticalFlip, 1),
            (Scale, 2),
            (Translate, 3),
            (RandomCropResize, 1),
            (Grayscale, 1),
            (Brightness, 1),
            (Cutout, 1),
            (Grid, 2)
        ]
    );
    let t = set.iter().find(|s| s.kind == Translate).unwrap();
    let inits: Vec<&str> = t.variants.iter().map(|v| v.init_words.as_str()).collect();
    assert_eq!(inits, ["on the left", "on the right"]);
    let b = set.iter().find(|s| s.kind == Brightness).unwrap();
    let inits: Vec<&str> = b.variants.iter().map(|v| v.init_words.as_str()).collect();
    assert_eq!(inits, ["bright", "dark"]);
}

#[test]
fn brightness_word_follows_delta_sign() {
    let set = default_augmentation_set();
    let b = set.iter().find(|s| s.kind == AugKind::Brightness).unwrap();
    let img = ImageTensor::filled(3, 8, 8, 0.0);
    let mut r = rng::stream(5, 0);
    for _ in 0..50 {
        let (out, tag) = transform_image(&img, b, &mut r).unwrap();
        let shift = out.data()[0];
        match tag.as_str() {
            "bright" => assert!(shift > 0.0),
            "dark" => assert!(shift < 0.0),
            other => panic!("unexpected tag {other}"),
        }
    }
}

#[test]
fn draw_edge_cases() {
    let set = default_augmentation_set();
    let mut r = rng::stream(1, 0);
    for _ in 0..100 {
        assert!(draw(&mut r, &set, 0.0).unwrap().is_none());
        assert_eq!(draw(&mut r, &set[3..4], 1.0).unwrap().unwrap().kind, AugKind::Translate);
    }
    assert!(matches!(draw(&mut r, &[], 0.5), Err(Error::Config(_))));
    assert!(draw(&mut r, &[], 0.0).unwrap().is_none());
}

#[test]
fn identity_and_vertical_flip_examples() {
    let img = image(2);
    let mut r = rng::stream(2, 1);
    let id = apply(&img, "a photo of v*", None, true, &mut r).unwrap();
    assert_eq!((id.prompt.as_str(), id.applied.as_str()), ("a photo of v*", IDENTITY));
    assert_eq!(id.image, img);

    let set = default_augmentation_set();
    let vf = set.iter().find(|s| s.kind == AugKind::VerticalFlip).unwrap();
    let mut seen_before = false;
    for _ in 0..20 {
        let s = apply(&img, "a photo of v*", Some(vf), true, &mut r).unwrap();
        assert_eq!(s.image, vflip(&img));
        if s.placement == Some(Placement::Before) {
            assert_eq!(s.prompt, "<aug:vflip:0> a photo of v*");
            seen_before = true;
        } else {
            assert_eq!(s.prompt, "a photo of v* <aug:vflip:0>");
        }
        assert_eq!(vflip(&s.image), img);
    }
    assert!(seen_before);
}

#[test]
fn placeholder_counts_match_specs_across_draws() {
    let set = default_augmentation_set();
    let img = image(3);
    let mut r = rng::stream(3, 1);
    for _ in 0..1000 {
        let spec = draw(&mut r, &set, 0.8).unwrap();
        let s = apply(&img, "a photo of v* with background", spec, true, &mut r).unwrap();
        assert_eq!(placeholders(&s.prompt), spec.map_or(0, |s| s.token_count), "{}", s.prompt);
    }
}

#[test]
fn naive_mode_transforms_without_tokens() {
    let set = default_augmentation_set();
    let mut r = rng::stream(4, 0);
    let s = apply(&image(4), "a photo of v*", Some(&set[0]), false, &mut r).unwrap();
    assert_eq!(s.prompt, "a photo of v*");
    assert_eq!(s.image, hflip(&image(4)));
}

#[test]
fn tiny_images_are_rejected() {
    let set = default_augmentation_set();
    let crop = set.iter().find(|s| s.kind == AugKind::RandomCropResize).unwrap();
    let img = ImageTensor::zeros(3, 2, 2);
    assert!(matches!(
        apply(&img, "a photo of v*", Some(crop), true, &mut rng::stream(0, 0)),
        Err(Error::Argument(_))
    ));
}

proptest! {
    #[test]
    fn flips_are_involutions_and_gray_is_idempotent(seed in any::<u64>()) {
        let img = image(seed);
        prop_assert_eq!(hflip(&hflip(&img)), img.clone());
        prop_assert_eq!(vflip(&vflip(&img)), img.clone());
        let g = grayscale(&img);
        prop_assert_eq!(grayscale(&g), g);
    }

    #[test]
    fn same_seed_same_samples(seed in any::<u64>()) {
        let set = default_augmentation_set();
        let img = image(seed ^ 1);
        let run = |seed| {
            let mut r = rng::stream(seed, 0);
            (0..20)
                .map(|_| {
                    let spec = draw(&mut r, &set, 0.8).unwrap();
                    apply(&img, "a photo of v*", spec, true, &mut r).unwrap()
                })
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(seed), run(seed));
    }

    #[test]
    fn transforms_keep_shape_and_finiteness(seed in any::<u64>(), which in 0usize..9) {
        let set = default_augmentation_set();
        let img = image(seed);
        let (out, tag) = transform_image(&img, &set[which], &mut rng::stream(seed, 1)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.is_finite());
        prop_assert!(set[which].variant(&tag).is_some());
    }
}
