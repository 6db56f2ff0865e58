use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use personalab::analysis::metrics::{diversity_stats, image_image_score, image_text_score, Split};
use personalab::analysis::{
    default_grouping, delta_weights, export_cross_attention, plots, timestep_effect_probe, DeltaGroup,
    EmbeddingBackend, ToyBackend,
};
use personalab::config::RunConfig;
use personalab::dataset::{fit_image, ToyDataset};
use personalab::model::{default_vocabulary, BaseModel};
use personalab::objectives::RegPromptSet;
use personalab::persistence::{self, read_header, Container, ContainerKind};
use personalab::pipeline::{mentions_subject, Personalized};
use personalab::pretrain::pretrain as run_pretrain;
use personalab::sampler::{SamplerMode, TimestepDistribution};
use personalab::trainer::{recon_moving_average, write_metrics_csv, Trainer};
use personalab::world::Scene;
use personalab::{assets, rng, Error, ImageTensor, NoisePredictor, Result};

use crate::Common;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::UnknownToken(_) | Error::AlreadyMerged => 2,
        Error::NonFinite { .. } => 3,
        Error::Checkpoint(_) | Error::Image(_) | Error::Io(_) => 4,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.finalize()
}

fn prepare_out(out: &Path, cfg: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(out)?;
    if let Some(cfg) = cfg {
        fs::write(out.join("config.txt"), cfg.to_text())?;
    }
    Ok(())
}

fn load_base(cfg: &RunConfig) -> Result<BaseModel> {
    let base = match &cfg.base_snapshot {
        Some(p) => BaseModel::from_snapshot(&persistence::load(p)?)?,
        None => assets::base_model()?,
    };
    if base.encoder.config() != &cfg.encoder {
        return Err(Error::Config(format!(
            "encoder.* settings {:?} do not match the base snapshot {:?}",
            cfg.encoder,
            base.encoder.config()
        )));
    }
    if base.denoiser.config() != &cfg.denoiser {
        return Err(Error::Config(format!(
            "denoiser.* settings {:?} do not match the base snapshot {:?}",
            cfg.denoiser,
            base.denoiser.config()
        )));
    }
    Ok(base)
}

fn load_reg(cfg: &RunConfig) -> Result<RegPromptSet> {
    match &cfg.reg_prompts {
        Some(p) => RegPromptSet::load(p),
        None => Ok(assets::reg_prompts()),
    }
}

fn personalized<'m>(base: &'m BaseModel, checkpoint: Option<&Path>) -> Result<Personalized<'m>> {
    match checkpoint {
        Some(p) => Personalized::from_checkpoint(base, &persistence::load(p)?),
        None => Ok(Personalized {
            encoder: base.encoder.clone(),
            adapters: None,
            denoiser: &base.denoiser,
        }),
    }
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_pairs(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(csv_writer(path)?);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["key", "value"]).map_err(io)?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(
    common: &Common,
    subject_dir: &Path,
    out: &Path,
    state_every: usize,
    resume: Option<&Path>,
    snapshots: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let base = load_base(&cfg)?;
    let reg = load_reg(&cfg)?;
    let schedule = cfg.schedule.build()?;
    let data = ToyDataset::load(subject_dir, base.denoiser.config().image_size)?;
    prepare_out(out, Some(&cfg))?;

    let mut trainer = Trainer::new(&cfg.train, &base, &schedule, &data.seen, &data.class_word, &reg)?;
    if let Some(state) = resume {
        trainer.restore_state(&persistence::load(state)?)?;
        eprintln!("resumed at step {}", trainer.step_index());
    }
    let tc = trainer.config().clone();
    eprintln!(
        "mode {}: {} trainable parameters; groups: adapters lr {} (constant), tokens lr {} (linear decay)",
        tc.mode,
        trainer.trainable_params(),
        tc.lr_adapters,
        tc.lr_tokens
    );
    while !trainer.is_done() {
        let m = trainer.step()?;
        if (m.step + 1) % 50 == 0 {
            eprintln!("step {:>4}  recon {:.4}  kp {:.4}  lr_token {:.2e}", m.step + 1, m.recon, m.kp, m.lr_token);
        }
        if state_every > 0 && (m.step + 1) % state_every == 0 && !trainer.is_done() {
            persistence::save(&trainer.save_state(), &out.join("state.plab"))?;
        }
    }
    let outcome = trainer.finish();
    let ckpt_path = out.join("checkpoint.plab");
    persistence::save(&outcome.checkpoint(), &ckpt_path)?;
    write_metrics_csv(&outcome.metrics, csv_writer(&out.join("metrics.csv"))?)?;
    let ma = recon_moving_average(&outcome.metrics, 20.min(outcome.metrics.len()));
    let mut summary = vec![
        ("mode", tc.mode.to_string()),
        ("steps", outcome.metrics.len().to_string()),
        ("subject", data.name.clone()),
        ("class_word", data.class_word.clone()),
        ("checkpoint_bytes", fs::metadata(&ckpt_path)?.len().to_string()),
    ];
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        summary.push(("recon_ma20_first", first.to_string()));
        summary.push(("recon_ma20_last", last.to_string()));
    }
    if snapshots {
        let before = base.to_snapshot(&tc.digest());
        persistence::save(&before, &out.join("before.plab"))?;
        persistence::save(&outcome.effective_snapshot(&base)?, &out.join("after.plab"))?;
    }
    write_pairs(&out.join("summary.csv"), &summary)?;
    eprintln!("wrote {}", ckpt_path.display());
    Ok(())
}

pub fn generate(common: &Common, checkpoint: &Path, prompt: &str, n: usize, out: &Path, allow_aug: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let base = load_base(&cfg)?;
    let schedule = cfg.schedule.build()?;
    if !mentions_subject(prompt) {
        eprintln!("warning: prompt does not mention the subject token v*");
    }
    let p = personalized(&base, Some(checkpoint))?;
    let images = p.generate(prompt, &schedule, cfg.seed, n, allow_aug)?;
    prepare_out(out, None)?;
    for (i, img) in images.iter().enumerate() {
        img.save_png(&out.join(format!("seed{}_{i:03}.png", cfg.seed)))?;
    }
    eprintln!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn read_pngs(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| fit_image(ImageTensor::load_png(p)?, size))
        .collect()
}

fn backend(cfg: &RunConfig, base: &BaseModel) -> Result<ToyBackend> {
    let d = base.denoiser.config();
    ToyBackend::new(&base.encoder, base.denoiser.image_shape(), d.patch.max(2), cfg.metrics_seed)
}

pub fn evaluate(
    common: &Common,
    subject_dir: &Path,
    out: &Path,
    generated: Option<&Path>,
    checkpoint: Option<&Path>,
    prompt: &str,
    n: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    let base = load_base(&cfg)?;
    let size = base.denoiser.config().image_size;
    let data = ToyDataset::load(subject_dir, size)?;
    prepare_out(out, Some(&cfg))?;
    let images = match (generated, checkpoint) {
        (Some(dir), _) => read_pngs(dir, size)?,
        (None, Some(ckpt)) => {
            let schedule = cfg.schedule.build()?;
            let imgs = personalized(&base, Some(ckpt))?.generate(prompt, &schedule, cfg.seed, n, false)?;
            let gen_dir = out.join("generated");
            fs::create_dir_all(&gen_dir)?;
            for (i, img) in imgs.iter().enumerate() {
                img.save_png(&gen_dir.join(format!("seed{}_{i:03}.png", cfg.seed)))?;
            }
            imgs
        }
        (None, None) => return Err(Error::Argument("pass --generated or --checkpoint".into())),
    };
    let be = backend(&cfg, &base)?;
    let mut rows = vec![
        ("backend", be.name().to_string()),
        ("images", images.len().to_string()),
        ("clip_t", image_text_score(&be, &images, prompt)?.to_string()),
        (
            "clip_i_seen",
            image_image_score(&be, &images, std::slice::from_ref(&data.seen), Split::Seen)?.to_string(),
        ),
        ("clip_i_unseen", image_image_score(&be, &images, &data.unseen, Split::Unseen)?.to_string()),
    ];
    if images.len() >= 2 {
        let div = diversity_stats(&be, &images)?;
        div.write_csv(csv_writer(&out.join("diversity.csv"))?)?;
        let sims: Vec<f64> = div.pairs.iter().map(|p| p.similarity).collect();
        plots::histogram(
            &sims,
            40,
            -1.0,
            1.0,
            &[(div.mean, plots::RED), (div.median, plots::GREEN)],
            &out.join("diversity.png"),
        )?;
        rows.push(("diversity_mean", div.mean.to_string()));
        rows.push(("diversity_median", div.median.to_string()));
    }
    write_pairs(&out.join("report.csv"), &rows)?;
    for (k, v) in &rows {
        println!("{k}: {v}");
    }
    Ok(())
}

fn parse_group(spec: &str) -> Result<DeltaGroup> {
    let (name, globs) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("group `{spec}` is not NAME=GLOB[,GLOB...]")))?;
    let globs: Vec<&str> = globs.split(',').map(str::trim).filter(|g| !g.is_empty()).collect();
    DeltaGroup::new(name.trim(), &globs)
}

fn load_snapshot(path: &Path) -> Result<Container> {
    let c = persistence::load(path)?;
    c.expect_kind(ContainerKind::Snapshot)?;
    Ok(c)
}

pub fn analyze_delta(before: &Path, after: &Path, out: &Path, groups: &[String]) -> Result<()> {
    let grouping = if groups.is_empty() {
        default_grouping()
    } else {
        groups.iter().map(|g| parse_group(g)).collect::<Result<_>>()?
    };
    let (b, a) = (load_snapshot(before)?, load_snapshot(after)?);
    let report = delta_weights(&b.tensors, &a.tensors, &grouping)?;
    prepare_out(out, None)?;
    report.write_csv(csv_writer(&out.join("delta.csv"))?)?;
    let values: Vec<f64> = report.entries.iter().map(|e| e.delta).collect();
    plots::bar_chart(&values, &out.join("delta.png"))?;
    for e in &report.entries {
        println!("{:<26} {:.6e}  ({} params)", e.group, e.delta, e.numel);
    }
    Ok(())
}

/// Deterministic probe images drawn from the sprite world.
pub fn probe_images(seed: u64, n: usize, size: usize) -> Result<Vec<ImageTensor>> {
    let mut r = rng::stream(seed, 0x9b0e);
    (0..n)
        .map(|_| fit_image(Scene::random(&mut r).render(), size))
        .collect()
}

pub fn probe(
    common: &Common,
    checkpoint: Option<&Path>,
    base_prompt: &str,
    others: &[String],
    images: usize,
    stride: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let base = load_base(&cfg)?;
    let schedule = cfg.schedule.build()?;
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    let p = personalized(&base, checkpoint)?;
    let imgs = probe_images(cfg.seed, images, base.denoiser.config().image_size)?;
    let timesteps: Vec<usize> = (0..schedule.steps()).step_by(stride).collect();
    let encode = |s: &str| p.condition(s);
    let curve = timestep_effect_probe(p.denoiser, &encode, base_prompt, others, &schedule, &imgs, &timesteps, cfg.seed)?;
    let overlay = TimestepDistribution::for_mode(SamplerMode::SnrWeighted, &schedule)?;
    prepare_out(out, Some(&cfg))?;
    curve.write_csv(&schedule, Some(&overlay), csv_writer(&out.join("probe.csv"))?)?;
    overlay.write_csv(schedule.log_snr(), csv_writer(&out.join("sampling.csv"))?)?;
    let xs: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    let ov: Vec<f64> = timesteps.iter().map(|&t| overlay.probs()[t]).collect();
    plots::curve_with_overlay(&xs, &curve.d, Some(&ov), &out.join("probe.png"))?;
    let rho = curve.spearman();
    write_pairs(
        &out.join("summary.csv"),
        &[
            ("base_prompt", base_prompt.to_string()),
            ("other_prompts", others.join(" | ")),
            ("schedule_id", curve.schedule_id.clone()),
            ("spearman_d_vs_t", rho.to_string()),
            ("max_d", curve.d.iter().copied().fold(0.0, f64::max).to_string()),
        ],
    )?;
    println!("spearman(d, t) = {rho:.4}");
    Ok(())
}

pub fn inspect(path: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    let header = read_header(&bytes)?;
    println!("{}", path.display());
    println!(
        "  kind {:?}, format v{}, {} bytes ({} payload)",
        header.kind,
        header.format_version,
        bytes.len(),
        header.payload_length
    );
    println!("  config digest {}", header.config_digest);
    for (k, v) in &header.metadata {
        if v.len() <= 80 {
            println!("  meta {k} = {v}");
        } else {
            println!("  meta {k} = <{} bytes>", v.len());
        }
    }
    println!("  {} tensors:", header.tensors.len());
    for t in &header.tensors {
        println!(
            "    {:<40} {:?} {}x{} @{}+{}",
            t.name, t.dtype, t.shape[0], t.shape[1], t.offset, t.length
        );
    }
    for t in &header.tokens {
        println!("  token {:<16} init `{}` {:?} -> {}", t.token, t.init_word, t.kind, t.tensor);
    }
    if let Some(other) = compare {
        let full = fs::metadata(other)?.len();
        println!(
            "  size ratio vs {}: {:.4}% ({} / {} bytes)",
            other.display(),
            100.0 * bytes.len() as f64 / full as f64,
            bytes.len(),
            full
        );
    }
    if let Some(dir) = out {
        prepare_out(dir, None)?;
        let mut w = csv::Writer::from_writer(csv_writer(&dir.join("directory.csv"))?);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["name", "dtype", "rows", "cols", "offset", "length"]).map_err(io)?;
        for t in &header.tensors {
            w.write_record([
                t.name.clone(),
                format!("{:?}", t.dtype).to_lowercase(),
                t.shape[0].to_string(),
                t.shape[1].to_string(),
                t.offset.to_string(),
                t.length.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn attention(
    common: &Common,
    checkpoint: Option<&Path>,
    prompt: &str,
    subject_dir: &Path,
    t: usize,
    layer: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let base = load_base(&cfg)?;
    let schedule = cfg.schedule.build()?;
    let data = ToyDataset::load(subject_dir, base.denoiser.config().image_size)?;
    let p = personalized(&base, checkpoint)?;
    let tokens = p.encoder.tokenize(prompt)?;
    let labels: Vec<String> = tokens
        .ids
        .iter()
        .map(|&id| {
            p.encoder
                .registry()
                .by_id(id)
                .map(|t| t.literal.clone())
                .or_else(|| p.encoder.vocab().word(id).map(str::to_owned))
                .unwrap_or_else(|| format!("#{id}"))
        })
        .collect();
    let cond = p.encoder.encode(p.adapters.as_ref(), &tokens)?;
    let maps = export_cross_attention(p.denoiser, &cond, labels, &data.seen, &schedule, t, layer, cfg.seed)?;
    prepare_out(out, Some(&cfg))?;
    maps.write_csv(csv_writer(&out.join("attention.csv"))?)?;
    let all: Vec<usize> = (0..maps.tokens.len()).collect();
    maps.write_pngs(out, &all, 8)?;
    Ok(())
}

pub fn pretrain(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let schedule = cfg.schedule.build()?;
    let mut model = BaseModel::new(cfg.encoder, cfg.denoiser, default_vocabulary(), cfg.seed)?;
    prepare_out(out, Some(&cfg))?;
    let every = (cfg.pretrain.steps / 20).max(1);
    let mut acc = 0.0;
    let losses = run_pretrain(&mut model, &schedule, &cfg.pretrain, |s, l| {
        acc += l;
        if (s + 1) % every == 0 {
            eprintln!("step {:>6}  recon {:.3}", s + 1, acc / every as f64);
            acc = 0.0;
        }
    })?;
    let mut w = csv::Writer::from_writer(csv_writer(&out.join("pretrain_loss.csv"))?);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["step", "recon"]).map_err(io)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush()?;
    persistence::save(&model.to_snapshot(&model.encoder.arch_digest()), &out.join("base.plab"))?;
    Ok(())
}
