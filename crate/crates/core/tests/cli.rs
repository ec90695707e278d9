use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jet::training::MetricRecord;

fn jet(args: &[&str], threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_jet"));
    c.args(args);
    match threads {
        Some(t) => c.env("JET_THREADS", t),
        None => c.env_remove("JET_THREADS"),
    };
    c.output().expect("spawn jet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, extra_model: &str) -> String {
    let out = dir.join(name);
    let text = format!(
        r#"
out_dir = "{}"

[model]
num_couplings = 2
channel_ratio = 1
spatial_policy = "checker_only"
vit = {{ depth = 1, width = 16, heads = 2 }}
geom = {{ height = 4, width = 4, channels = 3, patch = 2 }}
{extra_model}

[train]
preset = "desk"
steps = 6
batch_size = 8
warmup_steps = 2
eval_every = 3
checkpoint_every = 3

[data]
source = "synth"
kind = "stripes"
n = 32

[eval]
data = {{ source = "synth", kind = "uniform", n = 16, seed = 5 }}
"#,
        out.display()
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_eval_sample_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_a = write_config(tmp.path(), "a", "");
    let cfg_b = write_config(tmp.path(), "b", "");
    let a = jet(&["train", &cfg_a], Some("1"));
    assert_eq!(
        a.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&a.stderr)
    );
    let b = jet(&["train", &cfg_b], Some("3"));
    assert_eq!(b.status.code(), Some(0));

    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    let metrics = fs::read_to_string(run_a.join("metrics.log")).unwrap();
    let recs: Vec<MetricRecord> = metrics.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(recs.len(), 6);
    assert!(recs[2].eval_bpd.is_some() && recs[1].eval_bpd.is_none());
    assert_eq!(
        metrics,
        fs::read_to_string(run_b.join("metrics.log")).unwrap()
    );
    assert!(fs::read_to_string(run_a.join("resolved_config.toml"))
        .unwrap()
        .contains("base_lr"));

    let ck_a = run_a.join("checkpoint.jetf");
    let ck_b = run_b.join("checkpoint.jetf");
    assert_eq!(fs::read(&ck_a).unwrap(), fs::read(&ck_b).unwrap());
    let ck_a = ck_a.to_str().unwrap();
    let e1 = jet(
        &[
            "eval",
            ck_a,
            "synth:uniform:64:3",
            "--noise-seed",
            "4",
            "--repeats",
            "2",
        ],
        Some("1"),
    );
    let e2 = jet(
        &[
            "eval",
            ck_b.to_str().unwrap(),
            "synth:uniform:64:3",
            "--noise-seed",
            "4",
            "--repeats",
            "2",
        ],
        Some("4"),
    );
    assert_eq!(e1.status.code(), Some(0));
    assert_eq!(stdout(&e1), stdout(&e2));
    let lines: Vec<String> = stdout(&e1).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("repeat=0 bpd=") && lines[2].starts_with("mean_bpd="));
    let mean: f64 = lines[2]["mean_bpd=".len()..].parse().unwrap();
    assert!(mean > 8.0 && mean < 10.5, "{mean}");

    let s1 = tmp.path().join("s1");
    let s2 = tmp.path().join("s2");
    for dir in [&s1, &s2] {
        let o = jet(
            &[
                "sample",
                ck_a,
                "--count",
                "3",
                "--seed",
                "9",
                "--out",
                dir.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["sample_0000.ppm", "sample_0002.ppm", "latent_seeds.txt"] {
        assert_eq!(
            fs::read(s1.join(f)).unwrap(),
            fs::read(s2.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(fs::read(s1.join("sample_0001.ppm"))
        .unwrap()
        .starts_with(b"P6\n4 4\n255\n"));
}

#[test]
fn verify_fast_passes_and_catches_fault() {
    let ok = jet(&["verify", "--level", "fast"], None);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS"));
    let bad = jet(&["verify", "--inject-fault", "skip-log-m"], None);
    assert_eq!(bad.status.code(), Some(6));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(jet(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(jet(&["eval"], None).status.code(), Some(2));

    let typo = tmp.path().join("typo.toml");
    fs::write(
        &typo,
        fs::read_to_string(write_config(tmp.path(), "t", ""))
            .unwrap()
            .replace("batch_size", "batchsize"),
    )
    .unwrap();
    let o = jet(&["train", typo.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batchsize"));

    let odd = write_config(tmp.path(), "odd", "");
    fs::write(
        &odd,
        fs::read_to_string(&odd)
            .unwrap()
            .replace("channels = 3, patch = 2", "channels = 3, patch = 1"),
    )
    .unwrap();
    assert_eq!(jet(&["train", &odd], None).status.code(), Some(3));

    let cifar = tmp.path().join("cifar.toml");
    let text = fs::read_to_string(write_config(tmp.path(), "c", ""))
        .unwrap()
        .replace(
            "source = \"synth\"\nkind = \"stripes\"\nn = 32",
            &format!(
                "source = \"cifar10\"\npath = \"{}\"",
                tmp.path().join("nowhere").display()
            ),
        );
    fs::write(&cifar, text).unwrap();
    let o = jet(&["train", cifar.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.path"));

    let junk = tmp.path().join("junk.jetf");
    fs::write(&junk, b"JETF\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(
        jet(&["eval", junk.to_str().unwrap(), "synth:uniform"], None)
            .status
            .code(),
        Some(4)
    );
    assert_eq!(
        jet(&["sample", junk.to_str().unwrap()], None).status.code(),
        Some(4)
    );
}

#[test]
fn diverging_run_exits_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "boom", "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "preset = \"desk\"",
        "preset = \"desk\"\nbase_lr = 1e300\nwarmup_steps = 0",
    );
    fs::write(&cfg, text.replace("warmup_steps = 2\n", "")).unwrap();
    let o = jet(&["train", &cfg], None);
    assert_eq!(
        o.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = jet::config::RunConfig::load(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.resolved(false).1.validate().unwrap();
    }
}
