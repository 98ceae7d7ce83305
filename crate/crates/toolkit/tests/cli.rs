use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypermod::metrics::generate_class;
use hypermod::ClassInput;
use hypermod_toolkit::io::{load_image_folder, MetricRecord, GRID_PAD};
use hypermod_toolkit::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const RES: usize = 8;

const TINY: &str = r#"
pretrain.synthesis.n_blocks = 2
pretrain.synthesis.base_channels = 4
pretrain.synthesis.output_resolution = 8
pretrain.synthesis.latent_dim = 8
pretrain.synthesis.mapping_layers = 1
pretrain.d_channels = 4
pretrain.steps = 4
pretrain.batch_size = 4
train.steps = 6
train.batch_size = 4
train.eval_interval = 3
train.conditioning.d_embed = 8
train.conditioning.d_class = 8
train.conditioning.n_fc = 1
train.alignment.steps = 3
train.alignment.batch_size = 4
train.alignment.eval_batch = 4
train.r1_interval = 2
eval.n_fake_per_class = 8
eval.kid.subset_size = 4
eval.kid.n_subsets = 2
output.checkpoint_interval = 3
output.grid_samples = 2
"#;

struct Fx {
    dir: TempDir,
}

impl Fx {
    fn new() -> Self {
        let fx = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(fx.p("tiny.toml"), TINY).unwrap();
        fx.ok(&["make-toy", "--kind", "source", "--out", "src_data", "--n", "12", "--resolution", "8"]);
        fx.ok(&["make-toy", "--kind", "target", "--out", "tgt_data", "--n", "8", "--resolution", "8", "--seed", "1"]);
        fx
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.p("tiny.toml");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypermod"));
        if !args.contains(&"--resume") && !args.contains(&"--config") {
            cmd.arg("--config").arg(&cfg);
        }
        cmd.args(args).current_dir(self.dir.path()).env("HYPERMOD_OUTPUT_ROOT", self.dir.path()).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.run(args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    }

    fn pretrain(&self, out: &str) -> Checkpoint {
        self.ok(&["pretrain", "--data", "src_data", "--out", out]);
        Checkpoint::load(&self.p(out).join("checkpoint")).unwrap()
    }
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

#[test]
fn same_seed_gives_same_digest_and_manifest_reproduces() {
    let fx = Fx::new();
    let a = fx.pretrain("a");
    let b = fx.pretrain("b");
    assert_eq!(a.digest(), b.digest());
    let manifest = fx.p("a/manifest.toml");
    fx.ok(&["--config", manifest.to_str().unwrap(), "pretrain", "--data", "src_data", "--out", "c"]);
    assert_eq!(Checkpoint::load(&fx.p("c/checkpoint")).unwrap().digest(), a.digest());
    let other = fx.run(&["--set", "pretrain.seed=9", "pretrain", "--data", "src_data", "--out", "d"]);
    assert!(other.status.success());
    assert_ne!(Checkpoint::load(&fx.p("d/checkpoint")).unwrap().digest(), a.digest());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let fx = Fx::new();
    fx.pretrain("src");
    fx.ok(&["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "run"]);
    let orig = fx.p("run/checkpoint");
    let ck = Checkpoint::load(&orig).unwrap();
    let copy = fx.p("copy");
    ck.save(&copy).unwrap();
    assert_eq!(files_under(&orig), files_under(&copy));
    let t = ck.trainer().unwrap();
    assert_eq!(t.arrays(), ck.arrays);
    assert_eq!(t.step, 6);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let fx = Fx::new();
    fx.pretrain("src");
    fx.ok(&["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "full"]);
    fx.ok(&["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "split", "--until", "4"]);
    assert_eq!(Checkpoint::load(&fx.p("split/checkpoint")).unwrap().meta.step, 4);
    let out = Command::new(env!("CARGO_BIN_EXE_hypermod"))
        .args(["train", "--resume", "split", "--data"])
        .arg(fx.p("tgt_data"))
        .env("HYPERMOD_OUTPUT_ROOT", fx.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full = Checkpoint::load(&fx.p("full/checkpoint")).unwrap();
    let split = Checkpoint::load(&fx.p("split/checkpoint")).unwrap();
    assert_eq!(full.digest(), split.digest());
    for f in ["losses.tsv", "metrics.jsonl", "samples/step_0000006.png"] {
        assert_eq!(std::fs::read(fx.p("full").join(f)).unwrap(), std::fs::read(fx.p("split").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn aligned_model_reproduces_source_samples() {
    let fx = Fx::new();
    let src = fx.pretrain("src");
    fx.ok(&["--set", "train.alignment.steps=300", "align", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "al"]);
    let al = Checkpoint::load(&fx.p("al/checkpoint")).unwrap();
    assert_eq!(al.meta.step, 0);
    let g_src = src.sampling_generator().unwrap();
    let g_al = al.trainer().unwrap().g;
    let z = g_src.sample_latents(32, &mut ChaCha8Rng::seed_from_u64(3));
    let a = generate_class(&g_src, ClassInput::Source, &z).unwrap();
    let b = generate_class(&g_al, ClassInput::Source, &z).unwrap();
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    assert!(mse < 1e-2, "mse {mse}");
    let trace = std::fs::read_to_string(fx.p("al/alignment.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 301);
    assert!(fx.p("al/alignment.png").is_file());
    // training continues from the aligned state
    fx.ok(&["--set", "train.alignment.steps=300", "train", "--source", "al/checkpoint", "--data", "tgt_data", "--out", "run"]);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let fx = Fx::new();
    fx.pretrain("src");
    fx.ok(&["align", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "al"]);
    std::fs::remove_dir_all(fx.p("tgt_data/triangles")).unwrap();
    let (code, err) = fx.code(&["train", "--source", "al/checkpoint", "--data", "tgt_data", "--out", "run"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("3 classes") && err.contains("2"), "{err}");
    let (code, err) = fx.code(&["--set", "train.mode=hyper", "train", "--source", "al/checkpoint", "--data", "tgt_data", "--out", "r2"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn eval_mfid_is_mean_of_class_fids_and_knn_refuses_small_sets() {
    let fx = Fx::new();
    fx.pretrain("src");
    fx.ok(&["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "run"]);
    let out = fx.ok(&["eval", "--checkpoint", "run/checkpoint", "--data", "tgt_data", "--out", "ev"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mFID"));
    let recs: Vec<MetricRecord> = std::fs::read_to_string(fx.p("ev/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let fids: Vec<f64> = recs.iter().filter(|r| r.metric == "FID").map(|r| r.value).collect();
    assert_eq!(fids.len(), 3);
    let mfid = recs.iter().find(|r| r.metric == "mFID" && r.class.is_none()).unwrap();
    assert!((mfid.value - fids.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(recs.iter().all(|r| r.extractor == "randconv64-s0" && r.k == 5));
    assert!(recs.iter().any(|r| r.metric == "Precision%"));
    let (code, err) = fx.code(&["--set", "eval.k=8", "eval", "--checkpoint", "run/checkpoint", "--data", "tgt_data", "--out", "ev2"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("eval.k"), "{err}");
    let trace = std::fs::read_to_string(fx.p("run/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = trace
        .lines()
        .map(|l| serde_json::from_str::<MetricRecord>(l).unwrap())
        .filter(|r| r.metric == "mFID")
        .map(|r| r.step)
        .collect();
    assert_eq!(steps, vec![3, 6]);
}

fn tile(img: &image::RgbImage, row: usize, col: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for y in 0..RES {
        for x in 0..RES {
            let px = img.get_pixel((GRID_PAD + col * (RES + GRID_PAD) + x) as u32, (GRID_PAD + row * (RES + GRID_PAD) + y) as u32);
            out.extend_from_slice(&px.0);
        }
    }
    out
}

#[test]
fn sample_grids_and_interpolation_endpoints() {
    let fx = Fx::new();
    fx.pretrain("src");
    fx.ok(&["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "run"]);
    fx.ok(&["sample", "--checkpoint", "run/checkpoint", "--out", "all.png", "--n", "5"]);
    let all = image::open(fx.p("all.png")).unwrap().to_rgb8();
    assert_eq!(all.dimensions(), ((5 * RES + 6 * GRID_PAD) as u32, (3 * RES + 4 * GRID_PAD) as u32));
    fx.ok(&["sample", "--checkpoint", "run/checkpoint", "--out", "sq.png", "--n", "3", "--seed", "4", "--class", "squares"]);
    fx.ok(&["sample", "--checkpoint", "run/checkpoint", "--out", "tri.png", "--n", "3", "--seed", "4", "--class", "2"]);
    let args = ["interpolate", "--checkpoint", "run/checkpoint", "--out", "ip.png", "--from", "squares", "--to", "triangles"];
    fx.ok(&[&args[..], &["--n", "3", "--steps", "4", "--seed", "4"]].concat());
    let (sq, tri, ip) = (
        image::open(fx.p("sq.png")).unwrap().to_rgb8(),
        image::open(fx.p("tri.png")).unwrap().to_rgb8(),
        image::open(fx.p("ip.png")).unwrap().to_rgb8(),
    );
    assert_eq!(ip.dimensions(), ((4 * RES + 5 * GRID_PAD) as u32, (3 * RES + 4 * GRID_PAD) as u32));
    for i in 0..3 {
        assert_eq!(tile(&ip, i, 0), tile(&sq, 0, i));
        assert_eq!(tile(&ip, i, 3), tile(&tri, 0, i));
    }
    let noise = fx.p("noise.png");
    fx.ok(&[&args[..4], &[noise.to_str().unwrap()], &args[5..], &["--noise", "--n", "4"]].concat());
    assert!(noise.is_file());
    let (code, err) = fx.code(&["sample", "--checkpoint", "run/checkpoint", "--out", "x.png", "--class", "hexagons"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn per_class_runs_refuse_interpolation_and_alignment() {
    let fx = Fx::new();
    fx.pretrain("src");
    let pc = ["--set", "train.mode=per_class"];
    fx.ok(&[&pc[..], &["train", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "pc"]].concat());
    fx.ok(&["sample", "--checkpoint", "pc/checkpoint", "--out", "pc.png"]);
    let (code, err) =
        fx.code(&["interpolate", "--checkpoint", "pc/checkpoint", "--out", "i.png", "--from", "0", "--to", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("class network") && err.contains("per_class"), "{err}");
    let (code, err) = fx.code(&[&pc[..], &["align", "--source", "src/checkpoint", "--data", "tgt_data", "--out", "a"]].concat());
    assert_eq!(code, 2);
    assert!(err.contains("train.mode"), "{err}");
    let (code, _) = fx.code(&["align", "--source", "pc/checkpoint", "--data", "tgt_data", "--out", "a"]);
    assert_eq!(code, 2);
}

#[test]
fn dataset_order_is_stable_and_errors_name_the_path() {
    let fx = Fx::new();
    let a = load_image_folder(&fx.p("tgt_data"), RES).unwrap();
    assert_eq!(a.class_names(), ["discs", "squares", "triangles"]);
    assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 8);
    assert!(a.labels().windows(2).all(|w| w[0] <= w[1]));
    // copying files in reverse order yields the same set
    let rev = fx.p("rev");
    for class in a.class_names() {
        let mut files: Vec<_> = std::fs::read_dir(fx.p("tgt_data").join(class)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        std::fs::create_dir_all(rev.join(class)).unwrap();
        for f in files.iter().rev() {
            std::fs::copy(f, rev.join(class).join(f.file_name().unwrap())).unwrap();
        }
    }
    std::fs::write(rev.join("discs").join("notes.txt"), "ignored").unwrap();
    assert_eq!(load_image_folder(&rev, RES).unwrap(), a);
    let up = load_image_folder(&fx.p("tgt_data"), 16).unwrap();
    assert_eq!(up.resolution(), 16);
    let gray = fx.p("gray/only");
    std::fs::create_dir_all(&gray).unwrap();
    image::GrayImage::from_pixel(8, 8, image::Luma([255])).save(gray.join("g.png")).unwrap();
    let g = load_image_folder(&fx.p("gray"), RES).unwrap();
    assert!(g.images().data().iter().all(|&v| v == 1.0));
    let (code, err) = fx.code(&["pretrain", "--data", "nowhere", "--out", "x"]);
    assert_eq!(code, 3);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn exit_codes() {
    let fx = Fx::new();
    assert_eq!(fx.code(&["--set", "train.nope=1", "defaults"]).0, 2);
    let out = fx.ok(&["defaults"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train.mode = \"hyper_v\""));
    fx.pretrain("src");
    let victim = std::fs::read_dir(fx.p("src/checkpoint/arrays")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&victim, b"garbage").unwrap();
    let (code, err) = fx.code(&["sample", "--checkpoint", "src/checkpoint", "--out", "x.png"]);
    assert_eq!(code, 4, "{err}");
    assert_eq!(fx.code(&["sample", "--checkpoint", "missing", "--out", "x.png"]).0, 4);
    fx.pretrain("src2");
    let (code, err) = fx.code(&[
        "--set",
        "train.g_opt.lr=1e30",
        "--set",
        "train.d_opt.lr=1e30",
        "--set",
        "train.init=\"cold\"",
        "train",
        "--source",
        "src2/checkpoint",
        "--data",
        "tgt_data",
        "--out",
        "nan",
    ]);
    assert_eq!(code, 5, "{err}");
}

#[test]
fn source_checkpoint_samples_unconditionally() {
    let fx = Fx::new();
    let ck = fx.pretrain("src");
    assert!(ck.meta.class_names.is_empty());
    fx.ok(&["sample", "--checkpoint", "src/checkpoint", "--out", "s.png", "--n", "4"]);
    let img = image::open(fx.p("s.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), ((4 * RES + 5 * GRID_PAD) as u32, (RES + 2 * GRID_PAD) as u32));
    assert!(fx.p("src/losses.png").is_file() && fx.p("src/samples.png").is_file());
}
