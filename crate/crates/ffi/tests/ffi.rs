use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hit_core::config::TrainConfig;
use hit_core::eval::snapshot;
use hit_core::shapes::{table, SyntheticShape};
use hit_core::trainer::{items_from_shapes, Trainer};
use hit_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        resolution: 2,
        latent_dim: 8,
        parts_per_level: vec![2, 3],
        planes: 6,
        num_shapes: 1,
        batch_size: 1,
        queries_per_shape: 64,
        points_per_shape: 128,
        ..TrainConfig::desk()
    }
}

fn a_shape() -> SyntheticShape {
    table(4, &mut ChaCha8Rng::seed_from_u64(3))
}

/// Saves a checkpoint after one step and returns the training cloud.
fn write_checkpoint(path: &Path) -> Vec<[f64; 3]> {
    let cfg = tiny_config();
    let items = items_from_shapes(vec![a_shape()], cfg.points_per_shape, cfg.seed);
    let mut t = Trainer::new(cfg, items).unwrap();
    t.step().unwrap();
    t.checkpoint().save(path).unwrap();
    t.data[0].cloud.points.clone()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = hit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn flat(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

#[test]
fn missing_checkpoint_reports_io_error() {
    let path = CString::new("/nonexistent/model.bin").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { hit_model_load(path.as_ptr(), &mut m) };
    assert_eq!(s, HitStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.bin"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hit_model_load(ptr::null(), &mut m) }, HitStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { hit_model_num_levels(ptr::null(), &mut n) }, HitStatus::NullPointer);
    assert_eq!(unsafe { hit_hierarchy_num_levels(ptr::null(), &mut n) }, HitStatus::NullPointer);
    unsafe {
        hit_model_free(ptr::null_mut());
        hit_hierarchy_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(hit_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn inference_through_the_c_abi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.bin");
    let cloud = write_checkpoint(&ckpt);
    let cpath = c_path(&ckpt);

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hit_model_load(cpath.as_ptr(), &mut model) }, HitStatus::Ok);
    let mut levels = 0;
    assert_eq!(unsafe { hit_model_num_levels(model, &mut levels) }, HitStatus::Ok);
    assert_eq!(levels, 2);

    let pts = flat(&cloud);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hit_infer(model, pts.as_ptr(), cloud.len(), &mut h) }, HitStatus::Ok);

    let ck = hit_core::checkpoint::Checkpoint::load(&ckpt).unwrap();
    let reference = snapshot(
        &ck.params,
        &ck.config.model(),
        &hit_core::encoder::PointCloud::new(cloud.clone()),
    )
    .unwrap();

    let mut parts = 0;
    assert_eq!(unsafe { hit_hierarchy_num_parts(h, 2, &mut parts) }, HitStatus::Ok);
    assert_eq!(parts, 3);
    for k in 0..3 {
        let mut p = 0i64;
        assert_eq!(unsafe { hit_hierarchy_parent(h, 2, k, &mut p) }, HitStatus::Ok);
        assert_eq!(p, reference.levels[1].parents[k].unwrap() as i64);
    }
    let mut root = 0i64;
    assert_eq!(unsafe { hit_hierarchy_parent(h, 1, 0, &mut root) }, HitStatus::Ok);
    assert_eq!(root, -1);

    let mut occ = vec![0.0; cloud.len()];
    assert_eq!(
        unsafe { hit_hierarchy_occupancy(h, 2, 1, pts.as_ptr(), cloud.len(), occ.as_mut_ptr()) },
        HitStatus::Ok
    );
    for (o, x) in occ.iter().zip(&cloud) {
        assert_eq!(*o, reference.contained(2, 1, x));
    }
    let mut uni = vec![0.0; cloud.len()];
    assert_eq!(
        unsafe { hit_hierarchy_union(h, 1, pts.as_ptr(), cloud.len(), uni.as_mut_ptr()) },
        HitStatus::Ok
    );
    for (u, x) in uni.iter().zip(&cloud) {
        assert_eq!(*u, reference.union(1, x));
    }
    let mut seg = vec![usize::MAX; cloud.len()];
    assert_eq!(
        unsafe { hit_hierarchy_segment(h, 2, pts.as_ptr(), cloud.len(), seg.as_mut_ptr()) },
        HitStatus::Ok
    );
    let expect =
        hit_core::geometry::segment_points(&reference.level_contained(2, &cloud)).unwrap();
    assert_eq!(seg, expect);

    let mut bad = 0;
    assert_eq!(unsafe { hit_hierarchy_num_parts(h, 3, &mut bad) }, HitStatus::InvalidArgument);
    assert!(last_error().contains("level 3"));
    let mut p = 0i64;
    assert_eq!(unsafe { hit_hierarchy_parent(h, 2, 3, &mut p) }, HitStatus::InvalidArgument);

    let out = dir.path().join("export");
    let cout = c_path(&out);
    assert_eq!(unsafe { hit_hierarchy_export(h, cout.as_ptr(), 16) }, HitStatus::Ok);
    let tree = c_path(&out.join("tree.txt"));
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { hit_hierarchy_load_tree(tree.as_ptr(), &mut h2) }, HitStatus::Ok);
    let mut occ2 = vec![0.0; cloud.len()];
    assert_eq!(
        unsafe { hit_hierarchy_occupancy(h2, 2, 1, pts.as_ptr(), cloud.len(), occ2.as_mut_ptr()) },
        HitStatus::Ok
    );
    assert_eq!(occ, occ2);

    assert_eq!(unsafe { hit_hierarchy_export(h, cout.as_ptr(), 4) }, HitStatus::Config);

    unsafe {
        hit_hierarchy_free(h);
        hit_hierarchy_free(h2);
        hit_model_free(model);
    }
}

#[test]
fn empty_cloud_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.bin");
    write_checkpoint(&ckpt);
    let cpath = c_path(&ckpt);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hit_model_load(cpath.as_ptr(), &mut model) }, HitStatus::Ok);
    let mut h = ptr::null_mut();
    let s = unsafe { hit_infer(model, ptr::null(), 0, &mut h) };
    assert_ne!(s, HitStatus::Ok);
    assert!(h.is_null());
    unsafe { hit_model_free(model) };
}

#[test]
fn header_compiles_as_c_and_cxx() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hit.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "hit_model_load",
        "hit_infer",
        "hit_hierarchy_occupancy",
        "hit_hierarchy_segment",
        "hit_hierarchy_export",
        "hit_last_error",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .output()
        else {
            eprintln!("{cc} not available, skipping");
            continue;
        };
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
