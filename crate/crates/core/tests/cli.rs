use std::path::Path;
use std::process::{Command, Output};

fn hit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hit")).args(args).output().expect("spawn hit")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hit(&[]).status.code(), Some(1));
    assert_eq!(hit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hit(&["infer", "--ckpt"]).status.code(), Some(1));
    assert_eq!(hit(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let o = hit(&["infer", "--ckpt", "/nonexistent.bin", "--points", "/nonexistent.xyz", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = -1\n").unwrap();
    let o = hit(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn verify_oracle_passes() {
    let o = hit(&["verify", "oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(out.contains("oracle/cube.center_closed_form"));
    assert_eq!(hit(&["verify", "nonsense"]).status.code(), Some(1));
}

#[test]
fn pipeline_from_data_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(
        &cfg,
        "max_steps = 4\nbatch_size = 2\nnum_shapes = 4\nresolution = 4\nlatent_dim = 8\n\
         planes = 6\nqueries_per_shape = 64\npoints_per_shape = 128\nguide_samples = 16\ncheckpoint_every = 2\n",
    )
    .unwrap();

    let data = root.join("data");
    let o = hit(&["gen-data", "--config", p(&cfg), "--seed", "3", "--parts", "2,4", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("shape_0000.shape").exists());
    let cloud = data.join("shape_0000.xyz");
    assert!(cloud.exists());

    let run = root.join("run");
    let o = hit(&["train", "--config", p(&cfg), "--seed", "3", "--parts", "2,4", "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("effective seed 3"));
    let ckpt = run.join("final.bin");
    assert!(stdout(&o).contains("final.bin"));
    assert_eq!(std::fs::read_to_string(run.join("metrics.log")).unwrap().lines().count(), 4);

    let mid = run.join("ckpt_000002.bin");
    let resumed = root.join("resumed");
    let o = hit(&["train", "--ckpt", p(&mid), "--out", p(&resumed)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(resumed.join("final.bin")).unwrap(), std::fs::read(&ckpt).unwrap());

    let mesh_dir = root.join("meshes");
    let o = hit(&["infer", "--ckpt", p(&ckpt), "--points", p(&cloud), "--out", p(&mesh_dir), "--res", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(mesh_dir.join("tree.txt").exists());
    assert!(mesh_dir.join("segmentation.txt").exists());

    let again = root.join("again");
    let o = hit(&["export", "--tree", p(&mesh_dir.join("tree.txt")), "--out", p(&again), "--res", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(again.join("tree.txt").exists());

    let o = hit(&["eval", "--ckpt", p(&ckpt), "--dataset", p(&data), "--res", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let header = table.lines().find(|l| l.contains("level")).unwrap();
    for col in ["level", "parts", "chamfer", "vol_iou", "seg_miou"] {
        assert!(header.contains(col), "{table}");
    }
    let rows = table.lines().skip_while(|l| !l.contains("seg_miou")).skip(1);
    assert_eq!(rows.filter(|l| l.split_whitespace().count() == 5).count(), 2, "{table}");
}
