use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = "\
model.hidden=16
model.layers=2
model.heads=2
model.mlp=32
decoder.hidden=16
decoder.layers=1
decoder.heads=2
decoder.mlp=32
audio.frames=32
audio.bins=128
video.frames=4
video.height=32
video.width=32
video.tubelet_h=16
video.tubelet_w=16
train.batch_size=8
train.reference_batch=8
train.epochs=2
train.warmup_epochs=1
data.synth.samples=16
data.synth.eval_samples=8
data.synth.classes=4
classifier.heads=label:4
probe.epochs=20
";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `avmae <cmd>` with `BASE` plus `extra` as the config, writing to `out`.
    fn avmae(&self, cmd: &str, extra: &str, out: &str, args: &[&str]) -> Output {
        let config = self.path(&format!("{out}.conf"));
        fs::write(&config, format!("{BASE}{extra}")).unwrap();
        Command::new(env!("CARGO_BIN_EXE_avmae"))
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, cmd: &str, extra: &str, out: &str, args: &[&str]) -> String {
        let o = self.avmae(cmd, extra, out, args);
        assert!(
            o.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn init(&self, out: &str) -> String {
        format!("init.checkpoint={}\n", self.path(out).join("checkpoint").display())
    }
}

fn metric(stdout: &str, name: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name} ")))
        .unwrap_or_else(|| panic!("no {name} in output:\n{stdout}"))
        .parse()
        .unwrap()
}

fn history(dir: &Path) -> String {
    fs::read_to_string(dir.join("history.csv")).unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let run = Run::new();
    let o = run.avmae("pretrain", "model.hiden=8\n", "pre", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.hiden"));
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let run = Run::new();
    let o = run.avmae("finetune", &run.init("nowhere"), "ft", &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seeded_pretraining_repeats() {
    let run = Run::new();
    run.ok("pretrain", "", "a", &["--seed", "5"]);
    run.ok("pretrain", "", "b", &["--seed", "5"]);
    run.ok("pretrain", "", "c", &["--seed", "6"]);
    assert_eq!(history(&run.path("a")), history(&run.path("b")));
    assert_ne!(history(&run.path("a")), history(&run.path("c")));
    assert!(run.path("a/checkpoint").is_dir());
    assert!(run.path("a/config.txt").is_file());
}

#[test]
fn probe_checkpoint_evaluates_to_the_probe_accuracy() {
    let run = Run::new();
    run.ok("pretrain", "", "pre", &[]);
    let probe = run.ok("probe", &run.init("pre"), "probe", &[]);
    let eval = run.ok("eval", &run.init("probe"), "eval", &["--views", "1"]);
    assert_eq!(metric(&probe, "label_accuracy"), metric(&eval, "label_accuracy"));
    assert!(history(&run.path("eval")).contains("eval_1view"));
    assert!(history(&run.path("probe")).contains("probe_eval"));
}

#[test]
fn finetune_then_multi_view_eval() {
    let run = Run::new();
    run.ok("pretrain", "", "pre", &[]);
    for (i, fusion) in [
        "classifier.fusion_layer=0\n",
        "classifier.fusion_layer=1\nclassifier.bottlenecks=2\n",
        "classifier.fusion_layer=2\n",
    ]
    .iter()
    .enumerate()
    {
        let out = format!("ft{i}");
        let text = run.ok("finetune", &format!("{}{fusion}", run.init("pre")), &out, &[]);
        assert!(text.contains("init mapping"));
        assert!(history(&run.path(&out)).contains("label_accuracy"));
    }
    for views in ["1", "4"] {
        let out = format!("eval{views}");
        let text = run.ok("eval", &run.init("ft1"), &out, &["--views", views]);
        let acc = metric(&text, "label_accuracy");
        assert!((0.0..=1.0).contains(&acc));
        assert!(history(&run.path(&out)).contains(&format!("eval_{views}view")));
    }
}

#[test]
fn reconstruct_writes_one_image_per_modality() {
    let run = Run::new();
    run.ok("pretrain", "", "pre", &[]);
    run.ok("reconstruct", &run.init("pre"), "rec", &[]);
    let mut files: Vec<_> = fs::read_dir(run.path("rec"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    files.sort();
    assert_eq!(files, ["audio.png", "video.png"]);
}

#[test]
fn unmasked_reconstruction_shows_the_input() {
    let run = Run::new();
    let no_mask = "objective.alpha_audio=0\nobjective.alpha_video=0\n";
    run.ok("pretrain", "", "pre", &[]);
    run.ok("reconstruct", &format!("{no_mask}{}", run.init("pre")), "rec", &[]);
    for file in ["audio.png", "video.png"] {
        let img = image::open(run.path("rec").join(file)).unwrap().to_rgb8();
        let (w, h) = img.dimensions();
        let rh = h / 3;
        for y in 0..rh {
            for x in 0..w {
                assert_eq!(img.get_pixel(x, y), img.get_pixel(x, rh + y), "{file} at {x},{y}");
            }
        }
    }
}

#[test]
fn reconstruct_needs_a_pretraining_checkpoint() {
    let run = Run::new();
    run.ok("pretrain", "", "pre", &[]);
    run.ok("finetune", &run.init("pre"), "ft", &[]);
    let o = run.avmae("reconstruct", &run.init("ft"), "rec", &[]);
    assert_eq!(o.status.code(), Some(3));
}
