use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hypermod::data::{toy_source, toy_target};
use hypermod::metrics::generate_class;
use hypermod::train::{new_source, StepLosses};
use hypermod::{
    evaluate_generator, new_transfer, ClassInput, ClassSpec, EvalConfig, Generator, ImageSet, InitKind, MetricReport,
    Tensor, TrainingMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toml::Value;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::cli::{Cli, Command, ToyKind};
use crate::config::{flat_lines, RunConfig, MANIFEST_SECTION};
use crate::error::{Result, ToolError};
use crate::io::{
    jsonl, load_image_folder, save_grid, save_image_folder, save_plot, truncate_after, write_atomic, MetricRecord,
};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOSSES_FILE: &str = "losses.tsv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.tsv";
const LOSS_HEADER: &str = "step\td_gan\tg_gan\tr1\tcontrastive\td_total\n";

struct Ctx {
    cfg: RunConfig,
    root: Option<PathBuf>,
    argv: Vec<String>,
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

impl Ctx {
    fn out_path(&self, p: &Path) -> PathBuf {
        resolve(self.root.as_deref(), p)
    }

    /// Config plus the command line, as flat `key = value` lines.
    fn write_manifest(&self, dir: &Path, command: &str) -> Result<()> {
        let mut table = self.cfg.to_table()?;
        let mut m = toml::Table::new();
        m.insert("command".into(), Value::String(command.into()));
        m.insert("args".into(), Value::Array(self.argv.iter().cloned().map(Value::String).collect()));
        m.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        table.insert(MANIFEST_SECTION.into(), Value::Table(m));
        write_atomic(&dir.join(MANIFEST_FILE), flat_lines(&table).as_bytes())
    }

    fn write_config(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(CONFIG_FILE), self.cfg.to_flat_string()?.as_bytes())
    }
}

/// Runs one parsed command line; `argv` is recorded in manifests.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let cfg = match &cli.command {
        Command::Train { resume: Some(run), .. } => {
            let stored = resolve(cli.output_root.as_deref(), run).join(CONFIG_FILE);
            if cli.config.is_some() {
                return Err(ToolError::Config("--resume uses the run's stored config; pass changes with --set".into()));
            }
            RunConfig::load(Some(&stored), &cli.set)?
        }
        _ => RunConfig::load(cli.config.as_deref(), &cli.set)?,
    };
    let ctx = Ctx { cfg, root: cli.output_root.clone(), argv };
    match cli.command {
        Command::Defaults => {
            print!("{}", ctx.cfg.to_flat_string()?);
            Ok(())
        }
        Command::MakeToy { kind, out, n, resolution, seed } => make_toy(&ctx, kind, &out, n, resolution, seed),
        Command::Pretrain { data, out } => pretrain(&ctx, &data, &out),
        Command::Align { source, data, out } => align(&ctx, &source, &data, &out),
        Command::Train { source, resume, data, out, until } => {
            train(&ctx, source.as_deref(), resume.as_deref(), &data, out.as_deref(), until)
        }
        Command::Eval { checkpoint, data, out } => eval(&ctx, &checkpoint, &data, &out),
        Command::Sample { checkpoint, out, n, seed, class } => sample(&ctx, &checkpoint, &out, n, seed, class.as_deref()),
        Command::Interpolate { checkpoint, out, from, to, steps, n, seed, noise } => {
            interpolate(&ctx, &checkpoint, &out, &from, &to, steps, n, seed, noise)
        }
    }
}

fn make_toy(ctx: &Ctx, kind: ToyKind, out: &Path, n: usize, resolution: usize, seed: u64) -> Result<()> {
    let set = match kind {
        ToyKind::Source => toy_source::<f32>(n, resolution, seed)?,
        ToyKind::Target => toy_target::<f32>(n, resolution, seed)?,
    };
    let dir = ctx.out_path(out);
    save_image_folder(&set, &dir)?;
    println!("wrote {} images in {} class(es) to {}", set.len(), set.n_classes(), dir.display());
    Ok(())
}

fn loss_line(l: &StepLosses) -> String {
    let o = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
    format!("{}\t{}\t{}\t{}\t{}\t{}\n", l.step, l.d_gan, l.g_gan, o(l.r1), o(l.contrastive), l.d_total)
}

fn step_of_tsv(line: &str) -> Option<u64> {
    line.split('\t').next()?.parse().ok()
}

fn step_of_jsonl(line: &str) -> Option<u64> {
    serde_json::from_str::<MetricRecord>(line).ok().map(|r| r.step)
}

fn loss_series(text: &str, cols: &[(usize, &str)]) -> Vec<(String, Vec<(f64, f64)>)> {
    cols.iter()
        .map(|&(c, name)| {
            let pts = text
                .lines()
                .filter_map(|l| {
                    let f: Vec<&str> = l.split('\t').collect();
                    Some((f.first()?.parse().ok()?, f.get(c)?.parse().ok()?))
                })
                .collect();
            (name.to_string(), pts)
        })
        .collect()
}

fn pretrain(ctx: &Ctx, data: &Path, out: &Path) -> Result<()> {
    let pc = &ctx.cfg.pretrain;
    pc.synthesis.validate()?;
    let set = load_image_folder(data, pc.synthesis.output_resolution)?;
    let set = ImageSet::unlabeled(set.images().clone())?;
    let dir = ctx.out_path(out);
    fs::create_dir_all(&dir).map_err(ToolError::io(&dir))?;
    ctx.write_config(&dir)?;
    let mut t = new_source::<f32>(pc)?;
    let mut losses = String::from(LOSS_HEADER);
    for _ in 0..pc.steps {
        let l = t.train_step(&set)?;
        losses.push_str(&loss_line(&l));
        if l.step % 100 == 0 {
            eprintln!("pretrain step {} d={:.4} g={:.4}", l.step, l.d_total, l.g_gan);
        }
    }
    let mut g = t.g_ema;
    g.freeze_source()?;
    Checkpoint::source(&g, &t.d, pc).save(&dir.join(CHECKPOINT_DIR))?;
    write_atomic(&dir.join(LOSSES_FILE), losses.as_bytes())?;
    save_plot(&dir.join("losses.png"), "pretraining losses", "step", &loss_series(&losses, &[(5, "D total"), (2, "G")]))?;
    let z = g.sample_latents(ctx.cfg.output.grid_samples.max(1) * 4, &mut ChaCha8Rng::seed_from_u64(ctx.cfg.output.grid_seed));
    save_grid(&dir.join("samples.png"), &generate_class(&g, ClassInput::Source, &z)?, 4, ctx.cfg.output.grid_samples.max(1))?;
    ctx.write_manifest(&dir, "pretrain")?;
    println!("source checkpoint written to {}", dir.join(CHECKPOINT_DIR).display());
    Ok(())
}

fn class_names_of(data: &Path, resolution: usize) -> Result<ImageSet<f32>> {
    let set = load_image_folder(data, resolution)?;
    if set.n_classes() < 2 && set.class_names()[0] == "all" {
        return Err(ToolError::Data(format!(
            "{} has no class subfolders; conditional training needs one folder per class",
            data.display()
        )));
    }
    Ok(set)
}

fn write_alignment(dir: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("step\tloss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{v}");
    }
    write_atomic(&dir.join(ALIGNMENT_FILE), s.as_bytes())?;
    let pts = trace.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
    save_plot(&dir.join("alignment.png"), "self-alignment loss", "step", &[("L_align".into(), pts)])
}

fn load_source(path: &Path, what: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.kind != CheckpointKind::Source {
        return Err(ToolError::Config(format!("{what} expects a source checkpoint; {} is a transfer checkpoint", path.display())));
    }
    Ok(ck)
}

fn align(ctx: &Ctx, source: &Path, data: &Path, out: &Path) -> Result<()> {
    let tc = &ctx.cfg.train;
    if !tc.mode.uses_class_network() {
        return Err(ToolError::Config(format!(
            "train.mode = {:?} has no class network to align; use one of hyper, hyper_v, hyper_v_contrastive, hyper_ft",
            tc.mode.name()
        )));
    }
    let ck = load_source(source, "align")?;
    let set = class_names_of(data, ck.synthesis().output_resolution)?;
    let (g, d) = ck.source_models()?;
    let mut tc = tc.clone();
    tc.init = InitKind::SelfAligned;
    let setup = new_transfer(&g, &d, set.n_classes(), &tc, true)?;
    let report = setup.alignment.expect("self-aligned init reports");
    let dir = ctx.out_path(out);
    Checkpoint::transfer(&setup.trainer, &ck.meta.pretrain, &tc, set.class_names()).save(&dir.join(CHECKPOINT_DIR))?;
    write_alignment(&dir, &report.trace)?;
    ctx.write_config(&dir)?;
    ctx.write_manifest(&dir, "align")?;
    println!(
        "alignment loss {:.6} -> {:.6} ({:.2}% of initial)",
        report.initial_loss,
        report.final_loss,
        100.0 * report.final_loss / report.initial_loss
    );
    Ok(())
}

fn check_classes(model: &[String], data: &ImageSet<f32>) -> Result<()> {
    if model.len() != data.n_classes() {
        return Err(ToolError::Config(format!(
            "checkpoint has {} classes {:?}, dataset has {} {:?}",
            model.len(),
            model,
            data.n_classes(),
            data.class_names()
        )));
    }
    if model != data.class_names() {
        return Err(ToolError::Config(format!("checkpoint classes {model:?} differ from dataset classes {:?}", data.class_names())));
    }
    Ok(())
}

/// mFID of the averaged generator on the training data.
fn interval_eval(ctx: &Ctx, g: &Generator<f32>, data: &ImageSet<f32>, step: u64) -> Result<Vec<MetricRecord>> {
    let e = &ctx.cfg.eval;
    let cfg = EvalConfig { n_fake_per_class: e.n_fake_per_class, k: e.k, seed: e.seed, ..EvalConfig::fid_only() };
    let extractor = ctx.cfg.extractor.build()?;
    let rep = evaluate_generator(g, data, extractor.as_ref(), &cfg)?;
    Ok(records(&rep, step))
}

fn records(rep: &MetricReport, step: u64) -> Vec<MetricRecord> {
    let rec = |metric: &str, class: Option<&str>, value: f64| MetricRecord {
        step,
        metric: metric.to_string(),
        class: class.map(str::to_string),
        value,
        extractor: rep.extractor.clone(),
        k: rep.k,
    };
    let mut out = Vec::new();
    for c in &rep.per_class {
        for (m, v) in [
            ("FID", c.fid),
            ("KIDx100", c.kid),
            ("Precision%", c.precision),
            ("Recall%", c.recall),
            ("Densityx100", c.density),
            ("Coveragex100", c.coverage),
        ] {
            if let Some(v) = v {
                out.push(rec(m, Some(&c.name), v));
            }
        }
    }
    for (m, v) in rep.summary() {
        out.push(rec(m, None, v));
    }
    out
}

fn class_grid(ctx: &Ctx, g: &Generator<f32>, n_classes: usize) -> Result<Tensor<f64>> {
    let n = ctx.cfg.output.grid_samples.max(1);
    let z = g.sample_latents(n, &mut ChaCha8Rng::seed_from_u64(ctx.cfg.output.grid_seed));
    let rows: Vec<Tensor<f64>> = (0..n_classes).map(|c| render(g, &z, Row::Class(c))).collect::<Result<_>>()?;
    Ok(Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?)
}

struct RunFiles {
    losses: String,
    metrics: String,
}

fn train(
    ctx: &Ctx,
    source: Option<&Path>,
    resume: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
    until: Option<u64>,
) -> Result<()> {
    let tc = &ctx.cfg.train;
    let (dir, ck, mut files) = match resume {
        Some(run) => {
            let run = ctx.out_path(run);
            let ck = Checkpoint::load(&run.join(CHECKPOINT_DIR))?;
            let step = ck.meta.step;
            let read = |f: &str| fs::read_to_string(run.join(f)).unwrap_or_default();
            let files = RunFiles {
                losses: truncate_after(&read(LOSSES_FILE), step, step_of_tsv),
                metrics: truncate_after(&read(METRICS_FILE), step, step_of_jsonl),
            };
            (run, ck, files)
        }
        None => {
            let src = source.expect("clap requires --source without --resume");
            let dir = ctx.out_path(out.expect("clap requires --out without --resume"));
            (dir, Checkpoint::load(src)?, RunFiles { losses: LOSS_HEADER.into(), metrics: String::new() })
        }
    };
    let set = class_names_of(data, ck.synthesis().output_resolution)?;
    let mut trainer = match ck.meta.kind {
        CheckpointKind::Source => {
            if tc.mode == TrainingMode::PerClass || tc.init != InitKind::SelfAligned {
                eprintln!("initializing {} ({:?})", tc.mode.name(), tc.init);
            } else {
                eprintln!("self-aligning for {} steps", tc.alignment.steps);
            }
            let (g, d) = ck.source_models()?;
            let setup = new_transfer(&g, &d, set.n_classes(), tc, true)?;
            fs::create_dir_all(&dir).map_err(ToolError::io(&dir))?;
            if let Some(rep) = &setup.alignment {
                write_alignment(&dir, &rep.trace)?;
            }
            setup.trainer
        }
        CheckpointKind::Transfer => {
            let stored = ck.meta.train.as_ref().expect("transfer checkpoints carry a train config");
            let structural = |c: &hypermod::TrainConfig| (c.mode, c.effective_conditioning(), c.seed);
            if structural(stored) != structural(tc) {
                return Err(ToolError::Config(format!(
                    "config disagrees with the checkpoint on train.mode, train.conditioning or train.seed (checkpoint mode {})",
                    stored.mode.name()
                )));
            }
            check_classes(&ck.meta.class_names, &set)?;
            ck.trainer()?
        }
    };
    fs::create_dir_all(&dir).map_err(ToolError::io(&dir))?;
    ctx.write_config(&dir)?;
    let total = until.map_or(tc.steps as u64, |u| u.min(tc.steps as u64));
    let flush = |files: &RunFiles, t: &hypermod::Trainer<f32>| -> Result<()> {
        Checkpoint::transfer(t, &ck.meta.pretrain, tc, set.class_names()).save(&dir.join(CHECKPOINT_DIR))?;
        write_atomic(&dir.join(LOSSES_FILE), files.losses.as_bytes())?;
        write_atomic(&dir.join(METRICS_FILE), files.metrics.as_bytes())
    };
    let ckpt_every = ctx.cfg.output.checkpoint_interval as u64;
    let eval_every = tc.eval_interval as u64;
    while trainer.step < total {
        let l = trainer.train_step(&set)?;
        files.losses.push_str(&loss_line(&l));
        let s = trainer.step;
        if eval_every > 0 && s % eval_every == 0 {
            let recs = interval_eval(ctx, &trainer.g_ema, &set, s)?;
            if let Some(m) = recs.iter().find(|r| r.metric == "mFID") {
                eprintln!("step {s} mFID {:.4}", m.value);
            }
            files.metrics.push_str(&jsonl(&recs));
            save_grid(
                &dir.join("samples").join(format!("step_{s:07}.png")),
                &class_grid(ctx, &trainer.g_ema, set.n_classes())?,
                set.n_classes(),
                ctx.cfg.output.grid_samples.max(1),
            )?;
        }
        if ckpt_every > 0 && s % ckpt_every == 0 {
            flush(&files, &trainer)?;
        }
    }
    flush(&files, &trainer)?;
    save_plot(
        &dir.join("losses.png"),
        "training losses",
        "step",
        &loss_series(&files.losses, &[(5, "D total"), (2, "G"), (4, "contrastive")]),
    )?;
    let mfid: Vec<(f64, f64)> = files
        .metrics
        .lines()
        .filter_map(|l| serde_json::from_str::<MetricRecord>(l).ok())
        .filter(|r| r.metric == "mFID")
        .map(|r| (r.step as f64, r.value))
        .collect();
    save_plot(&dir.join("mfid.png"), "mFID", "step", &[("mFID".into(), mfid)])?;
    ctx.write_manifest(&dir, "train")?;
    println!("step {} of {}; checkpoint in {}", trainer.step, tc.steps, dir.join(CHECKPOINT_DIR).display());
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let g = ck.sampling_generator()?;
    let set = if ck.meta.kind == CheckpointKind::Transfer {
        let s = class_names_of(data, ck.synthesis().output_resolution)?;
        check_classes(&ck.meta.class_names, &s)?;
        s
    } else {
        load_image_folder(data, ck.synthesis().output_resolution)?
    };
    let e = &ctx.cfg.eval;
    if e.precision_recall || e.density_coverage {
        for c in 0..set.n_classes() {
            let n_real = set.indices_of(c).len();
            let n_fake = if e.n_fake_per_class == 0 { n_real } else { e.n_fake_per_class };
            if n_real.min(n_fake) <= e.k {
                return Err(ToolError::Config(format!(
                    "eval.k = {} needs more than {} real and generated samples per class; class {:?} has {} real, {} generated \
                     (lower eval.k or disable eval.precision_recall and eval.density_coverage)",
                    e.k,
                    e.k,
                    set.class_names()[c],
                    n_real,
                    n_fake
                )));
            }
        }
    }
    let extractor = ctx.cfg.extractor.build()?;
    let rep = evaluate_generator(&g, &set, extractor.as_ref(), e)?;
    let dir = ctx.out_path(out);
    write_atomic(&dir.join("report.txt"), rep.table().as_bytes())?;
    write_atomic(&dir.join("report.json"), (serde_json::to_string_pretty(&rep).expect("report serializes") + "\n").as_bytes())?;
    write_atomic(&dir.join(METRICS_FILE), jsonl(&records(&rep, ck.meta.step)).as_bytes())?;
    ctx.write_manifest(&dir, "eval")?;
    print!("{}", rep.table());
    Ok(())
}

fn class_index(ck: &Checkpoint, s: &str) -> Result<usize> {
    let names = &ck.meta.class_names;
    names
        .iter()
        .position(|n| n == s)
        .or_else(|| s.parse::<usize>().ok().filter(|&i| i < names.len()))
        .ok_or_else(|| ToolError::Config(format!("unknown class {s:?}; classes are {names:?}")))
}

enum Row<'a> {
    Class(usize),
    Vector(&'a Tensor<f32>),
}

/// Images for latents `z` under one class. Models with a class network go
/// through the class vector so interpolation endpoints reproduce samples.
fn render(g: &Generator<f32>, z: &Tensor<f32>, row: Row) -> Result<Tensor<f64>> {
    let v = match (row, g.conditioning.class_net()) {
        (Row::Vector(v), _) => v.clone(),
        (Row::Class(c), Some(net)) => net.embed_class(c)?,
        (Row::Class(c), None) => {
            let input = if g.conditioning.n_classes().is_some() { ClassInput::Target(c) } else { ClassInput::Source };
            return Ok(generate_class(g, input, z)?);
        }
    };
    let n = z.shape()[0];
    let d = v.numel();
    let vs = Tensor::from_vec(&[n, d], v.data().iter().copied().cycle().take(n * d).collect())?;
    Ok(g.sample(z, &ClassSpec::Vectors(&vs))?.cast())
}

fn sample(ctx: &Ctx, checkpoint: &Path, out: &Path, n: usize, seed: u64, class: Option<&str>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let g = ck.sampling_generator()?;
    let n = n.max(1);
    let z = g.sample_latents(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let classes: Vec<usize> = match (class, ck.meta.kind) {
        (Some(c), CheckpointKind::Transfer) => vec![class_index(&ck, c)?],
        (Some(_), CheckpointKind::Source) => {
            return Err(ToolError::Config("--class needs a transfer checkpoint; this source model is unconditional".into()))
        }
        (None, _) => (0..ck.n_classes().max(1)).collect(),
    };
    let rows: Vec<Tensor<f64>> = classes.iter().map(|&c| render(&g, &z, Row::Class(c))).collect::<Result<_>>()?;
    let path = ctx.out_path(out);
    save_grid(&path, &Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?, classes.len(), n)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interpolate(
    ctx: &Ctx,
    checkpoint: &Path,
    out: &Path,
    from: &str,
    to: &str,
    steps: usize,
    n: usize,
    seed: u64,
    noise: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let g = ck.sampling_generator()?;
    let net = g.conditioning.class_net().ok_or_else(|| {
        ToolError::Config(format!(
            "{} has no class network (mode {}); class interpolation needs hyper, hyper_v, hyper_v_contrastive or hyper_ft",
            checkpoint.display(),
            ck.meta.train.as_ref().map_or("source", |t| t.mode.name())
        ))
    })?;
    let (a, b) = (net.embed_class(class_index(&ck, from)?)?, net.embed_class(class_index(&ck, to)?)?);
    let (steps, n) = (steps.max(2), n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = if noise {
        let ends = g.sample_latents(2, &mut rng);
        let (z0, z1) = (ends.select_rows(&[0])?, ends.select_rows(&[1])?);
        let rows: Vec<Tensor<f32>> = (0..n)
            .map(|i| hypermod::hyper::lerp(&z0, &z1, if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 }))
            .collect::<hypermod::Result<_>>()?;
        Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?
    } else {
        g.sample_latents(n, &mut rng)
    };
    let mut cols = Vec::with_capacity(steps);
    for j in 0..steps {
        let v = hypermod::hyper::interpolate_class(&a, &b, j as f64 / (steps - 1) as f64)?;
        cols.push(render(&g, &z, Row::Vector(&v))?);
    }
    // columns are per class step; the grid is row-major over latents
    let r = ck.synthesis().output_resolution;
    let per = 3 * r * r;
    let mut data = Vec::with_capacity(n * steps * per);
    for i in 0..n {
        for c in &cols {
            data.extend_from_slice(&c.data()[i * per..(i + 1) * per]);
        }
    }
    let path = ctx.out_path(out);
    save_grid(&path, &Tensor::from_vec(&[n * steps, 3, r, r], data)?, n, steps)?;
    println!("wrote {}", path.display());
    Ok(())
}
