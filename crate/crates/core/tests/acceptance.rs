//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the report stays readable.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use personalab::analysis::{
    default_grouping, delta_weights, diversity_stats, image_image_score, image_text_score, spearman,
    timestep_effect_probe, EmbeddingBackend, Split,
};
use personalab::augment::{self, default_augmentation_set, draw, hflip, register_aug_tokens, vflip, AugKind};
use personalab::config::RunConfig;
use personalab::dataset::ToyDataset;
use personalab::denoiser::{Denoiser, DenoiserConfig};
use personalab::diffusion::{gaussian_image, make_schedule};
use personalab::model::{default_vocabulary, BaseModel};
use personalab::objectives::{kp_loss_encoders, total_loss, LossInputs, NoisedSample, Trainable};
use personalab::persistence::{self, Container};
use personalab::pipeline::Personalized;
use personalab::sampler::{snr_weighted_probs, SamplerMode, TimestepDistribution};
use personalab::text::{default_targets, inject_lora, merge_lora, EncoderConfig, TextEncoder, LEARNED_TABLE};
use personalab::trainer::{finetune_all, recon_moving_average, train, TrainConfig, TrainMode, TrainOutcome};
use personalab::{assets, rng, Error, ImageTensor, ParamStore, ScheduleKind, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// State shared by the criteria that need the bundled model and a trained run.
struct World {
    base: BaseModel,
    run: RunConfig,
    dog: ToyDataset,
    trained: Option<TrainOutcome>,
    train_time: Duration,
}

impl World {
    fn load() -> Result<Self, String> {
        let base = assets::base_model().map_err(e2s)?;
        let run = RunConfig::default().finalize().map_err(e2s)?;
        let size = base.denoiser.config().image_size;
        let dog = ToyDataset::load(&assets::fixtures_dir().join("subjects/red_dog"), size).map_err(e2s)?;
        Ok(Self {
            base,
            run,
            dog,
            trained: None,
            train_time: Duration::ZERO,
        })
    }

    fn default_run(&self) -> Result<TrainOutcome, String> {
        train(
            &self.run.train,
            std::slice::from_ref(&self.dog.seen),
            &self.dog.class_word,
            &assets::reg_prompts(),
            &self.base,
            &assets::default_schedule(),
        )
        .map_err(e2s)
    }

    fn trained(&self) -> Result<&TrainOutcome, String> {
        self.trained
            .as_ref()
            .ok_or_else(|| "default training run unavailable (see criterion 4)".to_owned())
    }
}

fn c1_snr_distribution() -> Outcome {
    let start = Instant::now();
    let s = assets::default_schedule();
    let d = snr_weighted_probs(s.log_snr()).map_err(e2s)?;
    let p = d.probs();
    let sum: f64 = p.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-9, || format!("sum {sum}"))?;
    ensure(p.iter().all(|&x| x >= 0.0), || "negative probability".into())?;
    let argmax = (0..s.steps())
        .max_by(|&a, &b| s.log_snr()[a].total_cmp(&s.log_snr()[b]))
        .unwrap();
    ensure(p[argmax] == 0.0, || format!("p[{argmax}] = {}", p[argmax]))?;
    ensure(p.windows(2).all(|w| w[1] >= w[0]), || "probabilities decrease somewhere".into())?;
    let toy = snr_weighted_probs(&[2.0, 0.0, -2.0]).map_err(e2s)?;
    ensure(toy.probs() == [0.0, 1.0 / 3.0, 2.0 / 3.0], || format!("toy {:?}", toy.probs()))?;
    let el = start.elapsed();
    ensure(el < Duration::from_secs(1), || format!("took {el:?}"))?;
    Ok(format!("sum-1 {:.1e}, p[{argmax}]=0, {el:.1?}", sum - 1.0))
}

fn c2_zero_init(w: &World) -> Outcome {
    let mut enc = w.base.encoder.clone();
    enc.register_subject_token("dog").map_err(e2s)?;
    let adapters = inject_lora(&enc, 4, 4.0, &default_targets(&enc), &mut rng::stream(1, 2)).map_err(e2s)?;
    let mut prompts: Vec<String> = assets::reg_prompts().prompts()[..20].to_vec();
    prompts.push("a photo of v*".into());
    for p in &prompts {
        let a = enc.encode_text(Some(&adapters), p).map_err(e2s)?;
        let b = enc.encode_text(None, p).map_err(e2s)?;
        ensure(a.data() == b.data(), || format!("outputs differ for {p:?}"))?;
    }
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let kp = kp_loss_encoders(&w.base.encoder, &enc, Some(&adapters), &refs[..20]).map_err(e2s)?;
    ensure(kp.abs() <= 1e-9, || format!("kp {kp}"))?;
    Ok(format!("{} prompts bitwise equal, kp {kp:.1e}", prompts.len()))
}

/// Loss value of the miniature setup with the given learned table and adapters.
struct Mini {
    encoder: TextEncoder,
    adapters: personalab::text::LoraAdapterSet,
    denoiser: Denoiser,
    batch: Vec<NoisedSample>,
    kp_prompts: Vec<personalab::text::TokenizedPrompt>,
    kp_targets: Vec<Tensor>,
}

impl Mini {
    fn new() -> Result<Self, String> {
        let enc_cfg = EncoderConfig {
            width: 8,
            layers: 1,
            heads: 2,
            max_len: 12,
            mlp_ratio: 2,
        };
        let den_cfg = DenoiserConfig {
            channels: 3,
            image_size: 4,
            patch: 2,
            width: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            cond_dim: 8,
        };
        let mut base = BaseModel::new(enc_cfg, den_cfg, default_vocabulary(), 5).map_err(e2s)?;
        // Fresh 0.02-std embeddings put every layer norm input near zero
        // variance, where curvature is so high that h = 1e-5 differences are
        // dominated by truncation error. Unit-scale rows behave like a
        // trained table.
        for name in ["embed", "pos"] {
            let t = base.encoder.params_mut().get_mut(name).unwrap();
            *t = t.scale(25.0);
        }
        let mut encoder = base.encoder.clone();
        encoder.register_subject_token("dog").map_err(e2s)?;
        let vf = default_augmentation_set()
            .into_iter()
            .find(|s| s.kind == AugKind::VerticalFlip)
            .unwrap();
        register_aug_tokens(&mut encoder, &vf).map_err(e2s)?;
        let mut r = rng::stream(9, 0);
        let mut adapters =
            inject_lora(&encoder, 2, 2.0, &default_targets(&encoder), &mut r).map_err(e2s)?;
        // Hand-set factors well away from zero so every gradient entry sits
        // far above the finite-difference roundoff floor.
        for (_, t) in adapters.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.2..0.6) * if r.gen() { 1.0 } else { -1.0 });
        }
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-3, 0.2).map_err(e2s)?;
        let x0 = gaussian_image(&mut r, (3, 4, 4)).map(|v| v.tanh());
        let mut batch = Vec::new();
        for (prompt, t) in [("a photo of v*", 7), ("<aug:vflip:0> a photo of v*", 31)] {
            let eps = gaussian_image(&mut r, (3, 4, 4));
            let tok = encoder.tokenize(prompt).map_err(e2s)?;
            batch.push(NoisedSample::new(&x0, &eps, tok, t, &s, 2).map_err(e2s)?);
        }
        let mut kp_prompts = Vec::new();
        let mut kp_targets = Vec::new();
        for p in ["a red dog on the grass", "a small cat in a room"] {
            let tok = base.encoder.tokenize(p).map_err(e2s)?;
            kp_targets.push(base.encoder.encode(None, &tok).map_err(e2s)?);
            kp_prompts.push(tok);
        }
        Ok(Self {
            encoder,
            adapters,
            denoiser: base.denoiser,
            batch,
            kp_prompts,
            kp_targets,
        })
    }

    fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            batch: &self.batch,
            kp_prompts: &self.kp_prompts,
            kp_targets: &self.kp_targets,
            lambda: 0.1,
        }
    }

    fn loss(&self) -> f64 {
        let (l, _) = total_loss(&self.encoder, Some(&self.adapters), &self.denoiser, &self.inputs(), Trainable::default())
            .expect("loss evaluates");
        l.total
    }
}

fn c3_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut m = Mini::new()?;
    let trainable = Trainable {
        tokens: true,
        adapters: true,
        ..Trainable::default()
    };
    let (l, grads) = total_loss(&m.encoder, Some(&m.adapters), &m.denoiser, &m.inputs(), trainable).map_err(e2s)?;
    ensure(l.kp > 0.0, || "kp term inactive".into())?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-300);

    let names: Vec<String> = m.adapters.params().names().cloned().collect();
    for name in &names {
        let analytic = grads.adapters.expect(name).clone();
        for i in 0..analytic.len() {
            let orig = m.adapters.params().expect(name).data()[i];
            m.adapters.params_mut().get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = m.loss();
            m.adapters.params_mut().get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = m.loss();
            m.adapters.params_mut().get_mut(name).unwrap().data_mut()[i] = orig;
            let e = rel(analytic.data()[i], (up - down) / (2.0 * h));
            ensure(e < 1e-4, || format!("{name}[{i}]: analytic {} numeric {}", analytic.data()[i], (up - down) / (2.0 * h)))?;
            worst = worst.max(e);
            checked += 1;
        }
    }
    let table = grads.tokens.expect(LEARNED_TABLE).clone();
    for i in 0..table.len() {
        let orig = m.encoder.learned().expect(LEARNED_TABLE).data()[i];
        let set = |m: &mut Mini, v: f64| m.encoder.learned_mut().get_mut(LEARNED_TABLE).unwrap().data_mut()[i] = v;
        set(&mut m, orig + h);
        let up = m.loss();
        set(&mut m, orig - h);
        let down = m.loss();
        set(&mut m, orig);
        let e = rel(table.data()[i], (up - down) / (2.0 * h));
        ensure(e < 1e-4, || format!("token[{i}]: analytic {} numeric {}", table.data()[i], (up - down) / (2.0 * h)))?;
        worst = worst.max(e);
        checked += 1;
    }
    let el = start.elapsed();
    ensure(el < Duration::from_secs(120), || format!("took {el:?}"))?;
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}, {el:.1?}"))
}

fn c4_overfit(w: &mut World) -> Outcome {
    let start = Instant::now();
    let first = w.default_run()?;
    w.train_time = start.elapsed();
    let second = w.default_run()?;
    let same = first.checkpoint().to_bytes() == second.checkpoint().to_bytes();
    let ma = recon_moving_average(&first.metrics, 20);
    let ratio = ma[ma.len() - 1] / ma[0];
    let steps = first.metrics.len();
    w.trained = Some(first);
    ensure(steps == 250, || format!("{steps} steps"))?;
    ensure(same, || "two runs with the same seed differ".into())?;
    ensure(w.train_time < Duration::from_secs(300), || format!("took {:?}", w.train_time))?;
    ensure(ratio <= 0.2, || {
        format!("moving-average ratio {ratio:.3} (first {:.3}, last {:.3})", ma[0], ma[ma.len() - 1])
    })?;
    Ok(format!("ratio {ratio:.3}, deterministic, {:.1?} per run", w.train_time))
}

/// Norm-ratio oracle with its own grouping by path pattern and its own
/// accumulation order.
fn oracle_delta(before: &ParamStore, after: &ParamStore) -> Vec<(&'static str, f64)> {
    let group = |n: &str| {
        if n.starts_with("encoder.block") && n.contains(".attn.") {
            Some("text_encoder_attention")
        } else if n.starts_with("encoder.block") && n.contains(".mlp.") {
            Some("text_encoder_mlp")
        } else if n.starts_with("denoiser.block") && n.contains(".xattn.") {
            Some("denoiser_cross_attention")
        } else if n.starts_with("denoiser.") {
            Some("denoiser_other")
        } else {
            None
        }
    };
    let names = ["text_encoder_attention", "text_encoder_mlp", "denoiser_cross_attention", "denoiser_other"];
    names
        .iter()
        .map(|&g| {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut keys: Vec<&String> = before.names().filter(|n| group(n) == Some(g)).collect();
            keys.reverse();
            for k in keys {
                for (x, y) in before.expect(k).data().iter().zip(after.expect(k).data()).rev() {
                    num += (y - x) * (y - x);
                    den += x * x;
                }
            }
            (g, num.sqrt() / den.sqrt())
        })
        .collect()
}

fn compare_to_oracle(before: &Container, after: &Container) -> Result<Vec<(String, f64)>, String> {
    let report = delta_weights(&before.tensors, &after.tensors, &default_grouping()).map_err(e2s)?;
    let mut out = Vec::new();
    for (g, expect) in oracle_delta(&before.tensors, &after.tensors) {
        let got = report.get(g).ok_or_else(|| format!("group {g} missing"))?.delta;
        ensure((got - expect).abs() <= 1e-12 * expect.max(1.0), || {
            format!("{g}: report {got:e} vs oracle {expect:e}")
        })?;
        out.push((g.to_owned(), got));
    }
    Ok(out)
}

fn c5_freeze_ledger(w: &World) -> Outcome {
    let out = w.trained()?;
    let before = w.base.to_snapshot("before");
    let after = out.effective_snapshot(&w.base).map_err(e2s)?;
    let text = compare_to_oracle(&before, &after)?;
    for (g, d) in &text {
        if g.starts_with("denoiser") {
            ensure(*d == 0.0, || format!("text mode moved {g}: {d:e}"))?;
        } else {
            ensure(*d > 0.0, || format!("text mode left {g} unchanged"))?;
        }
    }
    let changed = before.tensors.changed_names(&after.tensors);
    ensure(changed.iter().all(|n| n.starts_with("encoder.")), || "denoiser weights changed".into())?;

    let cfg = TrainConfig {
        mode: TrainMode::FullFinetune,
        steps: 3,
        ..w.run.train.clone()
    };
    let (b, a, _) = finetune_all(
        &cfg,
        &w.dog.seen,
        &w.dog.class_word,
        &assets::reg_prompts(),
        &w.base,
        &assets::default_schedule(),
    )
    .map_err(e2s)?;
    let full = compare_to_oracle(&b, &a)?;
    for (g, d) in &full {
        ensure(*d > 0.0, || format!("full finetune left {g} unchanged"))?;
    }
    let fmt = |v: &[(String, f64)]| v.iter().map(|(g, d)| format!("{g}={d:.2e}")).collect::<Vec<_>>().join(" ");
    Ok(format!("text [{}] full [{}]", fmt(&text), fmt(&full)))
}

fn c6_augmentation(w: &World) -> Outcome {
    let specs = default_augmentation_set();
    let mut r = rng::stream(6, 0);
    let n = 100_000;
    let base_prompt = "a photo of v*";
    let mut applied = 0usize;
    for _ in 0..n {
        let spec = draw(&mut r, &specs, 0.8).map_err(e2s)?;
        let sample = augment::apply(&w.dog.seen, base_prompt, spec, true, &mut r).map_err(e2s)?;
        let placeholders: Vec<&str> = sample
            .prompt
            .split_whitespace()
            .filter(|t| t.starts_with("<aug:") && t.ends_with('>'))
            .collect();
        match spec {
            None => {
                ensure(placeholders.is_empty() && sample.prompt == base_prompt, || {
                    format!("identity sample has prompt {:?}", sample.prompt)
                })?;
                ensure(sample.image == w.dog.seen, || "identity sample changed the image".into())?;
            }
            Some(s) => {
                applied += 1;
                ensure(placeholders.len() == s.token_count, || {
                    format!("{} emitted {} placeholders, expected {}", s.kind, placeholders.len(), s.token_count)
                })?;
                let tag = sample.variant.as_deref().unwrap_or_default();
                ensure(s.variant(tag).is_some(), || format!("{} emitted unknown tag {tag}", s.kind))?;
                for (k, p) in placeholders.iter().enumerate() {
                    ensure(*p == format!("<aug:{tag}:{k}>"), || format!("unexpected placeholder {p}"))?;
                }
            }
        }
    }
    let frac = applied as f64 / n as f64;
    ensure((frac - 0.8).abs() <= 0.01, || format!("applied fraction {frac}"))?;
    for i in 0..20 {
        let img = gaussian_image(&mut rng::stream(60, i), (3, 16, 16));
        ensure(hflip(&hflip(&img)) == img && vflip(&vflip(&img)) == img, || "flip is not an involution".into())?;
    }
    Ok(format!("applied fraction {frac:.4} over {n} draws"))
}

fn c7_merge(w: &World) -> Outcome {
    let mut enc = w.base.encoder.clone();
    enc.register_subject_token("dog").map_err(e2s)?;
    let mut r = rng::stream(7, 0);
    let mut adapters = inject_lora(&enc, 4, 4.0, &default_targets(&enc), &mut r).map_err(e2s)?;
    for (_, t) in adapters.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
    }
    let merged = merge_lora(&enc, &adapters).map_err(e2s)?;
    let pool = assets::reg_prompts();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let mut p = pool.prompts()[r.gen_range(0..pool.len())].clone();
        if i % 2 == 0 {
            p = p.replacen(&w.dog.class_word, "v*", 1);
        }
        let dynamic = enc.encode_text(Some(&adapters), &p).map_err(e2s)?;
        let folded = merged.encode_text(None, &p).map_err(e2s)?;
        let scale = dynamic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = dynamic
            .data()
            .iter()
            .zip(folded.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    ensure(worst <= 1e-5, || format!("relative difference {worst:e}"))?;
    Ok(format!("20 prompts, worst relative difference {worst:.1e}"))
}

fn c8_persistence(w: &World) -> Outcome {
    let out = w.trained()?;
    let ckpt = out.checkpoint();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.plab");
    persistence::save(&ckpt, &path).map_err(e2s)?;
    let loaded = persistence::load(&path).map_err(e2s)?;
    ensure(loaded.to_bytes() == ckpt.to_bytes(), || "re-serialized bytes differ".into())?;
    for (n, t) in ckpt.tensors.iter() {
        let u = loaded.tensors.get(n).ok_or_else(|| format!("{n} lost"))?;
        ensure(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("{n} differs after load")
        })?;
    }
    ensure(
        ckpt.tensors
            .names()
            .all(|n| n.starts_with("lora.") || n.starts_with("token.")),
        || "checkpoint holds base weights".into(),
    )?;
    let s = assets::default_schedule();
    let live = Personalized::from_outcome(&w.base, out)
        .generate("a photo of v*", &s, 21, 2, false)
        .map_err(e2s)?;
    let restored = Personalized::from_checkpoint(&w.base, &loaded)
        .map_err(e2s)?
        .generate("a photo of v*", &s, 21, 2, false)
        .map_err(e2s)?;
    ensure(live == restored, || "post-load generations differ".into())?;
    let snap_path = dir.path().join("snapshot.plab");
    persistence::save(&out.effective_snapshot(&w.base).map_err(e2s)?, &snap_path).map_err(e2s)?;
    let a = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
    let b = std::fs::metadata(&snap_path).map_err(|e| e.to_string())?.len();
    let ratio = a as f64 / b as f64;
    ensure(ratio < 0.01, || format!("size ratio {ratio:.4} ({a} / {b} bytes)"))?;
    Ok(format!("bitwise round-trip, generations equal, size ratio {:.3}% ({a} / {b} bytes)", ratio * 100.0))
}

fn c9_sampler() -> Outcome {
    let d = TimestepDistribution::from_weights(&[0.0, 1.0, 2.0], SamplerMode::SnrWeighted).map_err(e2s)?;
    let n = 300_000;
    let draws = d.sample(&mut rng::stream(9, 0), n);
    let mut counts = [0usize; 3];
    draws.iter().for_each(|&t| counts[t] += 1);
    let mut worst = 0.0f64;
    for (c, p) in counts.iter().zip(d.probs()) {
        worst = worst.max((*c as f64 / n as f64 - p).abs());
    }
    ensure(worst <= 0.005, || format!("frequency error {worst}"))?;
    ensure(counts[0] == 0, || format!("zero-probability timestep drawn {} times", counts[0]))?;

    let s = assets::default_schedule();
    let full = TimestepDistribution::for_mode(SamplerMode::SnrWeighted, &s).map_err(e2s)?;
    let draws = full.sample(&mut rng::stream(9, 1), n);
    let mut counts = vec![0usize; s.steps()];
    draws.iter().for_each(|&t| counts[t] += 1);
    let mut worst_full = 0.0f64;
    for (c, p) in counts.iter().zip(full.probs()) {
        worst_full = worst_full.max((*c as f64 / n as f64 - p).abs());
    }
    ensure(worst_full <= 0.005, || format!("schedule frequency error {worst_full}"))?;
    ensure(counts[0] == 0, || "max-SNR timestep drawn".into())?;
    Ok(format!("max frequency error {worst:.4} (3 points), {worst_full:.5} (T={})", s.steps()))
}

fn probe_images(w: &World) -> Result<Vec<ImageTensor>, String> {
    let size = w.base.denoiser.config().image_size;
    let mut imgs = Vec::new();
    for name in ["red_dog", "blue_striped_car", "yellow_spotted_cup"] {
        let d = ToyDataset::load(&assets::fixtures_dir().join("subjects").join(name), size).map_err(e2s)?;
        imgs.push(d.seen);
        imgs.extend(d.unseen);
    }
    imgs.truncate(8);
    Ok(imgs)
}

fn c10_probe(w: &World) -> Outcome {
    let s = assets::default_schedule();
    let imgs = probe_images(w)?;
    let ts: Vec<usize> = (0..s.steps()).step_by(10).collect();
    let enc = |p: &str| w.base.encoder.encode_text(None, p);
    let base = "a photo of a dog";
    let same = timestep_effect_probe(&w.base.denoiser, &enc, base, &[base.to_owned()], &s, &imgs, &ts, 0).map_err(e2s)?;
    ensure(same.d.iter().all(|&d| d == 0.0), || "identical prompts give nonzero d(t)".into())?;
    let curve = timestep_effect_probe(
        &w.base.denoiser,
        &enc,
        base,
        &["a photo of a cat".to_owned()],
        &s,
        &imgs,
        &ts,
        0,
    )
    .map_err(e2s)?;
    let t: Vec<f64> = curve.timesteps.iter().map(|&t| t as f64).collect();
    let rho = spearman(&curve.d, &t);
    ensure(rho > 0.0, || format!("spearman {rho}"))?;
    Ok(format!("flat zero for identical prompts, spearman(d, t) = {rho:.3}"))
}

/// Embeddings looked up by the first pixel value of an image.
struct Stub {
    images: Vec<Vec<f64>>,
    text: Vec<f64>,
}

impl EmbeddingBackend for Stub {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.text.len()
    }

    fn embed_image(&self, image: &ImageTensor) -> personalab::Result<Vec<f64>> {
        Ok(self.images[image.data()[0] as usize].clone())
    }

    fn embed_text(&self, _: &str) -> personalab::Result<Vec<f64>> {
        Ok(self.text.clone())
    }
}

fn tagged(i: usize) -> ImageTensor {
    ImageTensor::filled(1, 1, 1, i as f64)
}

fn c11_metrics() -> Outcome {
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let stub = Stub {
        images: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![r2, r2], vec![-r2, r2]],
        text: vec![1.0, 0.0],
    };
    let three: Vec<ImageTensor> = (0..3).map(tagged).collect();
    let t = image_text_score(&stub, &three, "a photo of v*").map_err(e2s)?;
    let expect = (1.0 + 0.0 + r2) / 3.0;
    ensure((t - expect).abs() <= 1e-9, || format!("image_text {t} vs {expect}"))?;

    let gen = [tagged(0), tagged(2)];
    let refs = [tagged(1), tagged(3)];
    let i = image_image_score(&stub, &gen, &refs, Split::Unseen).map_err(e2s)?;
    // cos(e0,e1)=0, cos(e0,e3)=-r2, cos(e2,e1)=r2, cos(e2,e3)=0
    let expect = (0.0 - r2 + r2 + 0.0) / 4.0;
    ensure((i - expect).abs() <= 1e-9, || format!("image_image {i} vs {expect}"))?;

    let four: Vec<ImageTensor> = (0..4).map(tagged).collect();
    let d = diversity_stats(&stub, &four).map_err(e2s)?;
    let mut sims = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            let (x, y) = (&stub.images[a], &stub.images[b]);
            sims.push(x[0] * y[0] + x[1] * y[1]);
        }
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    sims.sort_by(f64::total_cmp);
    let median = (sims[2] + sims[3]) / 2.0;
    ensure(d.pairs.len() == 6, || format!("{} pairs", d.pairs.len()))?;
    ensure((d.mean - mean).abs() <= 1e-9 && (d.median - median).abs() <= 1e-9, || {
        format!("diversity mean {} median {} vs {mean} {median}", d.mean, d.median)
    })?;

    let same: Vec<ImageTensor> = (0..5).map(|_| tagged(2)).collect();
    let d = diversity_stats(&stub, &same).map_err(e2s)?;
    ensure(d.mean == 1.0 && d.median == 1.0 && d.pairs.iter().all(|p| p.similarity == 1.0), || {
        format!("identical images give mean {} median {}", d.mean, d.median)
    })?;
    Ok(format!("clip_t {t:.6}, clip_i {i:.6}, diversity mean {mean:.6} median {median:.6}"))
}

fn main() -> ExitCode {
    let mut world = match World::load() {
        Ok(w) => Some(w),
        Err(e) => {
            eprintln!("could not load the bundled model: {e}");
            None
        }
    };
    let missing = || Err::<String, _>("bundled model unavailable".to_owned());
    let criteria: Vec<(&str, Box<dyn FnOnce(Option<&mut World>) -> Outcome>)> = vec![
        ("1 snr-weighted distribution", Box::new(|_| c1_snr_distribution())),
        ("2 zero-init identity", Box::new(move |w| w.map_or_else(missing, |w| c2_zero_init(w)))),
        ("3 gradient check", Box::new(|_| c3_gradient_check())),
        ("4 one-shot overfit", Box::new(move |w| w.map_or_else(missing, c4_overfit))),
        ("5 freeze ledger", Box::new(move |w| w.map_or_else(missing, |w| c5_freeze_ledger(w)))),
        ("6 augmentation bookkeeping", Box::new(move |w| w.map_or_else(missing, |w| c6_augmentation(w)))),
        ("7 merge equivalence", Box::new(move |w| w.map_or_else(missing, |w| c7_merge(w)))),
        ("8 persistence", Box::new(move |w| w.map_or_else(missing, |w| c8_persistence(w)))),
        ("9 sampler statistics", Box::new(|_| c9_sampler())),
        ("10 probe sanity", Box::new(move |w| w.map_or_else(missing, |w| c10_probe(w)))),
        ("11 metric math", Box::new(|_| c11_metrics())),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let w = world.as_mut();
        let res = catch_unwind(AssertUnwindSafe(|| run(w))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let el = start.elapsed();
        match res {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{el:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{el:.1?}]");
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
