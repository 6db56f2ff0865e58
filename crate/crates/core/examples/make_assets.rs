//! Regenerates the bundled regularization prompts and fixture subjects.
//!
//! `cargo run --example make_assets -- <base|reg|fixtures|golden>`

use std::collections::BTreeSet;
use std::path::Path;

use personalab::dataset::{variants, write_subject};
use personalab::model::{default_vocabulary, BaseModel};
use personalab::pretrain::pretrain;
use personalab::world::*;
use personalab::{assets, persistence, rng};

fn subjects() -> Vec<(&'static str, Scene)> {
    let scene = |class, color, pattern, background, position, accent, spots| Scene {
        class,
        color,
        pattern,
        background,
        position,
        size: Size::Big,
        mirrored: false,
        style: Style {
            stretch: (1.05, 0.95),
            accent,
            spots,
        },
    };
    vec![
        ("red_dog", scene(Class::Dog, Color::Red, Pattern::Plain, Background::Grass, Position::Middle, Color::Black, 1)),
        ("blue_striped_car", scene(Class::Car, Color::Blue, Pattern::Striped, Background::Sand, Position::Left, Color::Yellow, 2)),
        ("yellow_spotted_cup", scene(Class::Cup, Color::Yellow, Pattern::Spotted, Background::Snow, Position::Right, Color::Brown, 3)),
    ]
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    match std::env::args().nth(1).as_deref() {
        Some("base") => {
            let cfg = personalab::config::RunConfig::default().finalize().unwrap();
            let schedule = cfg.schedule.build().unwrap();
            let mut m = BaseModel::new(cfg.encoder, cfg.denoiser, default_vocabulary(), 0).unwrap();
            pretrain(&mut m, &schedule, &cfg.pretrain, |s, l| {
                if (s + 1) % 500 == 0 {
                    eprintln!("step {} loss {l:.2}", s + 1);
                }
            })
            .unwrap();
            persistence::save(&m.to_snapshot("base"), &root.join("assets/base.plab")).unwrap();
        }
        Some("reg") => {
            let mut r = rng::stream(2024, 0x7e9);
            let mut seen = BTreeSet::new();
            let mut lines = Vec::new();
            while lines.len() < 200 {
                let c = Scene::random(&mut r).caption_dropout(&mut r, 0.6);
                if seen.insert(c.clone()) {
                    lines.push(c);
                }
            }
            std::fs::write(root.join("assets/reg_prompts.txt"), lines.join("\n") + "\n").unwrap();
        }
        Some("fixtures") => {
            let mut r = rng::stream(2024, 0xf1c);
            for (name, s) in subjects() {
                let vs = variants(&s, &mut r, 3);
                write_subject(&root.join("fixtures/subjects").join(name), &s, &vs).unwrap();
            }
        }
        Some("golden") => {
            let base = assets::base_model().unwrap();
            let schedule = assets::default_schedule();
            let d = personalab::dataset::ToyDataset::load(&root.join("fixtures/subjects/red_dog"), 16).unwrap();
            let cfg = personalab::trainer::TrainConfig {
                steps: 3,
                ..Default::default()
            };
            let out = personalab::trainer::train(&cfg, &[d.seen], &d.class_word, &assets::reg_prompts(), &base, &schedule).unwrap();
            persistence::save(&out.checkpoint(), &root.join("fixtures/golden.plab")).unwrap();
        }
        _ => eprintln!("usage: make_assets <base|reg|fixtures|golden>"),
    }
}
