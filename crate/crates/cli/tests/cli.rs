use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fped(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fped")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_data(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--seed", "3", "--n-train", "12", "--n-val", "4", "--n-test", "6", "--out", out];
    args.extend_from_slice(extra);
    fped(dir, &args)
}

fn write_cfg(dir: &Path) {
    fs::write(dir.join("run.cfg"), "# tiny run\ndata = d.bin\nout_dir = run\nepochs = 2\nbatch_size = 4\n").unwrap();
}

#[test]
fn validate_config_accepts_good_and_rejects_bad() {
    let t = tempfile::tempdir().unwrap();
    write_cfg(t.path());
    let o = fped(t.path(), &["validate-config", "run.cfg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!t.path().join("manifest.txt").exists());

    fs::write(t.path().join("bad.cfg"), "epochs = 2\nepochs = 3\n").unwrap();
    assert_eq!(code(&fped(t.path(), &["validate-config", "bad.cfg"])), 2);
    fs::write(t.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(&fped(t.path(), &["validate-config", "bad.cfg"])), 2);
    fs::write(t.path().join("bad.cfg"), "capacity_factor = 3\n").unwrap();
    assert_eq!(code(&fped(t.path(), &["validate-config", "bad.cfg"])), 2);
}

#[test]
fn usage_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let o = fped(t.path(), &["train"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
    assert_eq!(code(&fped(t.path(), &["no-such-command"])), 1);
    assert_eq!(code(&fped(t.path(), &["eval", "--ckpt", "x", "--split", "bogus"])), 1);
    assert_eq!(code(&fped(t.path(), &["train", "--config", "c", "--mode", "bogus"])), 1);
}

#[test]
fn gen_data_is_deterministic_and_guards_outputs() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_data(t.path(), "a.bin", &["--csv", "a.csv"])), 0);
    assert_eq!(code(&small_data(t.path(), "b.bin", &["--csv", "b.csv"])), 0);
    let read = |f: &str| fs::read(t.path().join(f)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_eq!(read("a.csv"), read("b.csv"));
    let manifest = |f: &str| {
        String::from_utf8(read(f)).unwrap().lines().filter(|l| !l.starts_with("output")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(manifest("a.bin.manifest.txt"), manifest("b.bin.manifest.txt"));

    let before = read("a.bin");
    let o = small_data(t.path(), "a.bin", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(read("a.bin"), before);
    assert_eq!(code(&small_data(t.path(), "a.bin", &["--force"])), 0);
    assert_eq!(read("a.bin"), before);
}

#[test]
fn train_eval_interpret_and_generate() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(&small_data(d, "d.bin", &[])), 0);
    write_cfg(d);
    let o = fped(d, &["train", "--config", "run.cfg", "--set", "lr=0.002"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["loss.csv", "router.csv", "model.ckpt", "config.txt", "manifest.txt"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let stored = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(stored.contains("lr = 0.002"), "{stored}");
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,batch,"));
    assert_eq!(code(&fped(d, &["train", "--config", "run.cfg"])), 2);

    let o = fped(d, &["eval", "--ckpt", "run/model.ckpt", "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(d.join("run/metrics_test.csv")).unwrap();
    assert!(m.starts_with("split,samples,text_two_way"));
    assert!(m.lines().nth(1).unwrap().starts_with("test,6,"));

    let o = fped(d, &["interpret", "--ckpt", "run/model.ckpt", "--sample-id", "0", "--out-dir", "interp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..7 {
        assert!(d.join(format!("interp/expert_{k}_heatmap.pgm")).exists());
    }
    assert!(d.join("interp/routing_contrib_text.csv").exists());

    let o = fped(d, &["gen-image", "--ckpt", "run/model.ckpt", "--sample-id", "1", "--out-dir", "img", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("img/sample_1.pgm").exists());
    let o = fped(
        d,
        &["gen-image", "--ckpt", "run/model.ckpt", "--sample-id", "1", "--out-dir", "img2", "--stage2-ckpt", "img/stage2.ckpt"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(d.join("img/sample_1.pgm")).unwrap(), fs::read(d.join("img2/sample_1.pgm")).unwrap());

    assert_eq!(code(&fped(d, &["interpret", "--ckpt", "run/model.ckpt", "--sample-id", "999", "--out-dir", "x"])), 2);
    assert_eq!(code(&fped(d, &["eval", "--ckpt", "missing.ckpt", "--split", "test"])), 2);
}

#[test]
fn flags_override_config_and_runs_repeat_bitwise() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(&small_data(d, "d.bin", &[])), 0);
    write_cfg(d);
    let args = ["train", "--config", "run.cfg", "--out-dir", "r1", "--epochs", "1", "--mode", "uniform", "--force"];
    let o = fped(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(d.join("r1/config.txt")).unwrap();
    assert!(cfg.contains("epochs = 1") && cfg.contains("mode = uniform"), "{cfg}");
    let files = ["loss.csv", "router.csv", "model.ckpt", "manifest.txt"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(d.join("r1").join(f)).unwrap()).collect();
    assert_eq!(code(&fped(d, &args)), 0);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(d.join("r1").join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn ablate_writes_one_row_per_mode() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(&small_data(d, "d.bin", &[])), 0);
    write_cfg(d);
    let o = fped(d, &["ablate", "--config", "run.cfg", "--epochs", "1", "--modes", "moe,onlyv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("run/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("moe,") && rows[2].starts_with("onlyv,"));
}
