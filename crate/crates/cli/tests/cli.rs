use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wali(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wali"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wali(args);
    assert!(
        out.status.success(),
        "wali {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn eval_mmpmr_on_hand_written_table() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "morph_id,d1,d2\na,0.3,0.4\nb,0.6,0.2\nc,0.45,0.49\n").unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["eval-mmpmr", "--scores", p(&scores), "--threshold", "0.5", "--out-dir", p(&out)]);
    assert_eq!(stdout.trim(), "0.6667");
    assert!(out.join("manifest.json").exists());
    assert!(fs::read_to_string(out.join("mmpmr_report.csv")).unwrap().contains("0.6666"));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"identities": 12, "image_sise": 16}"#).unwrap();
    let out = wali(&["synth-data", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`image_sise`"));

    let out = wali(&["synth-data", "--set", "identities=\"many\"", "--out-dir", p(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`identities`"));

    let out = wali(&["synth-data", "--set", "identities=3", "--out-dir", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`n_identities`"));

    let toml = dir.path().join("c.toml");
    fs::write(&toml, "[training]\nbatch_size = 1\n").unwrap();
    let out = wali(&["train-wali", "--config", p(&toml), "--out-dir", p(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`dataset`"));
}

#[test]
fn identical_runs_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-data", "--seed", "5", "--set", "identities=10", "--set", "samples_per_identity=2", "--out-dir", p(d)]);
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    assert!(a.join("timing.json").exists());
}

const TINY_NET: &[&str] = &["base_width=4", "hidden=16", "latent_dim=8", "fr_dim=8"];

fn net_sets(prefix: &str) -> Vec<String> {
    TINY_NET.iter().map(|s| format!("{prefix}.network.{s}")).collect()
}

fn with_sets<'a>(base: &[&'a str], sets: &'a [String]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    for s in sets {
        v.push("--set");
        v.push(s);
    }
    v
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let reg = root.join("registry.json");
    ok(&["synth-data", "--seed", "1", "--set", "identities=10", "--set", "samples_per_identity=4", "--out-dir", p(&data)]);

    let mut fr_sets = net_sets("fr");
    fr_sets.extend(["fr.epochs=1".to_string(), "fr.batch_size=8".to_string()]);
    for id in ["fr-a", "fr-b"] {
        let out = root.join(id);
        let base = ["train-fr", "--dataset", p(&data), "--registry", p(&reg), "--backend", id, "--out-dir", p(&out)];
        ok(&with_sets(&base, &fr_sets));
        let cal = root.join(format!("cal-{id}"));
        ok(&["calibrate", "--dataset", p(&data), "--registry", p(&reg), "--backend", id, "--out-dir", p(&cal)]);
        assert!(cal.join("det.csv").exists());
    }

    let mut t_sets = net_sets("training");
    t_sets.extend(
        ["training.baseline_epochs=1", "training.finetune_epochs=1", "training.batch_size=8"]
            .map(String::from),
    );
    let tw = root.join("wali");
    ok(&with_sets(&["train-wali", "--dataset", p(&data), "--out-dir", p(&tw)], &t_sets));
    let baseline = tw.join("checkpoints/baseline.bin");
    assert!(baseline.exists() && tw.join("logs/losses.csv").exists());

    let ft = root.join("ft");
    let base = ["finetune-wali", "--dataset", p(&data), "--model", p(&baseline), "--registry", p(&reg), "--backend", "fr-a", "--out-dir", p(&ft)];
    ok(&with_sets(&base, &t_sets));
    let model = ft.join("checkpoints/finetune.bin");
    assert!(model.exists() && ft.join("checkpoints/baseline.bin").exists());

    // Steps 0/0: decode of the midpoint only.
    let mid = root.join("mid");
    let sets: Vec<String> = ["selection.n_pairs=4", "optimization.steps_phase1=0", "optimization.steps_phase2=0"]
        .map(String::from)
        .to_vec();
    let base = ["gen-morphs", "--model", p(&model), "--dataset", p(&data), "--registry", p(&reg), "--backend", "fr-a", "--out-dir", p(&mid)];
    ok(&with_sets(&base, &sets));
    let meta = fs::read_to_string(mid.join("metadata.jsonl")).unwrap();
    assert_eq!(meta.lines().count(), 4);
    assert!(meta.lines().all(|l| l.contains("\"steps_phase2\":0")));

    let opt = root.join("opt");
    let protocol = mid.join("protocol.jsonl");
    let sets: Vec<String> = ["optimization.steps_phase1=3", "optimization.steps_phase2=3", "backends=[\"fr-a\",\"fr-b\"]"]
        .map(String::from)
        .to_vec();
    let base = ["gen-morphs", "--model", p(&model), "--dataset", p(&data), "--registry", p(&reg), "--protocol", p(&protocol), "--out-dir", p(&opt)];
    ok(&with_sets(&base, &sets));
    let first = fs::read_to_string(opt.join("metadata.jsonl")).unwrap();
    assert!(first.contains("fr-b"));

    let ev = root.join("eval");
    let stdout = ok(&["eval-mmpmr", "--set", &format!("morphs={}", p(&opt)), "--dataset", p(&data), "--registry", p(&reg), "--backend", "fr-a,fr-b", "--out-dir", p(&ev)]);
    assert_eq!(stdout.lines().count(), 2);
    let bound = root.join("bound");
    let stdout = ok(&["eval-bound", "--protocol", p(&protocol), "--dataset", p(&data), "--registry", p(&reg), "--backend", "fr-a,fr-b", "--out-dir", p(&bound)]);
    for (line_m, line_b) in fs::read_to_string(ev.join("mmpmr_report.csv")).unwrap().lines().skip(1).zip(stdout.lines()) {
        let m: f64 = line_m.rsplit(',').next().unwrap().parse().unwrap();
        let b: f64 = line_b.split(' ').nth(1).unwrap().parse().unwrap();
        assert!(b >= m);
    }

    // Detector on bona fide dataset images versus the midpoint morphs.
    let mut list = String::from("path,attack,probe\n");
    for e in fs::read_to_string(&protocol).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(e).unwrap();
        let id = v["pair_id"].as_str().unwrap();
        let probe = data.join(format!("images/{}.png", v["probe1"].as_str().unwrap()));
        list.push_str(&format!("{},1,{}\n", mid.join(format!("morphs/{id}.png")).display(), probe.display()));
        for key in ["image1", "image2"] {
            let img = data.join(format!("images/{}.png", v[key].as_str().unwrap()));
            list.push_str(&format!("{},0,{}\n", img.display(), probe.display()));
        }
    }
    let samples = root.join("samples.csv");
    fs::write(&samples, list).unwrap();
    let mt = root.join("mad");
    ok(&["mad-train", "--samples", p(&samples), "--set", "lbp.grid=2", "--out-dir", p(&mt)]);
    let me = root.join("mad-eval");
    let stdout = ok(&["mad-eval", "--model", p(&mt.join("mad.json")), "--samples", p(&samples), "--out-dir", p(&me)]);
    assert!(stdout.starts_with("BPCER"));
    let md = root.join("dmad");
    ok(&["mad-train", "--samples", p(&samples), "--set", "kind=dmad", "--registry", p(&reg), "--backend", "fr-a", "--out-dir", p(&md)]);
    ok(&["mad-eval", "--model", p(&md.join("mad.json")), "--samples", p(&samples), "--registry", p(&reg), "--out-dir", p(&root.join("dmad-eval"))]);

    let det = root.join("det");
    ok(&["det-export", "--scores", p(&me.join("scores.csv")), "--out-dir", p(&det)]);
    assert!(fs::read_to_string(det.join("det.csv")).unwrap().starts_with("threshold,apcer,bpcer"));
    ok(&["det-export", "--scores", p(&root.join("cal-fr-a/scores.json")), "--out-dir", p(&det)]);
    assert!(fs::read_to_string(det.join("det.csv")).unwrap().starts_with("threshold,fmr,fnmr"));

    // Missing artifacts surface as errors.
    let out = wali(&["gen-morphs", "--model", p(&root.join("nope.bin")), "--dataset", p(&data), "--out-dir", p(&root.join("x"))]);
    assert!(!out.status.success());
}
