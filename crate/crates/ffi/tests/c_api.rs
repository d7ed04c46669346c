use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use cat_core::harness::{gen_dataset, DatasetKind};
use cat_core::metrics::{cosine_sim, harmonic_mean, kps_features};
use cat_ffi::*;

fn last_error() -> String {
    let mut needed = 0usize;
    let mut buf = vec![0 as c_char; 256];
    let status = unsafe { cat_last_error_message(buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(status, CatStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn metrics_match_the_core_crate() {
    let a = [0.3, -1.2, 2.0, 0.5];
    let b = [1.1, 0.4, 1.9, -0.2];
    let mut out = 0.0;
    assert_eq!(unsafe { cat_cosine_similarity(a.as_ptr(), b.as_ptr(), 4, &mut out) }, CatStatus::Ok);
    assert_eq!(out, cosine_sim(&a, &b).unwrap());

    let xs = [0.2, 0.9, 0.5];
    assert_eq!(unsafe { cat_harmonic_mean(xs.as_ptr(), 3, &mut out) }, CatStatus::Ok);
    assert_eq!(out, harmonic_mean(&xs).unwrap());

    let with = [1.0, 0.0, 0.5, 0.5, 0.2, 0.9];
    let without = [0.0, 1.0, 0.5, 0.4, 0.3, 0.8];
    assert_eq!(unsafe { cat_kps_features(with.as_ptr(), without.as_ptr(), 3, 2, &mut out) }, CatStatus::Ok);
    let rows = |s: &[f64]| s.chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>();
    assert_eq!(out, kps_features(&rows(&with), &rows(&without)).unwrap().score);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = 0.0;
    let a = [1.0, 2.0];
    assert_eq!(unsafe { cat_cosine_similarity(a.as_ptr(), ptr::null(), 2, &mut out) }, CatStatus::NullPointer);
    assert!(last_error().contains("b is null"));

    let zero = [0.0, 0.0];
    assert_eq!(unsafe { cat_cosine_similarity(a.as_ptr(), zero.as_ptr(), 2, &mut out) }, CatStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    let mut ds = ptr::null_mut();
    let kind = CString::new("spirals").unwrap();
    assert_eq!(unsafe { cat_dataset_generate(kind.as_ptr(), 1, &mut ds) }, CatStatus::InvalidArgument);
    assert!(ds.is_null());
    assert!(last_error().contains("spirals"));

    // success clears the message
    assert_eq!(unsafe { cat_harmonic_mean(a.as_ptr(), 2, &mut out) }, CatStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn truncated_error_message_reports_full_length() {
    let mut out = 0.0;
    let _ = unsafe { cat_harmonic_mean(ptr::null(), 3, &mut out) };
    let mut needed = 0;
    let mut buf = [0 as c_char; 4];
    assert_eq!(unsafe { cat_last_error_message(buf.as_mut_ptr(), 4, &mut needed) }, CatStatus::Ok);
    assert_eq!(needed, "xs is null".len());
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "xs ");
}

#[test]
fn dataset_handle_round_trip() {
    let kind = CString::new("gauss2d").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { cat_dataset_generate(kind.as_ptr(), 7, &mut ds) }, CatStatus::Ok);
    let (mut len, mut dim) = (0, 0);
    assert_eq!(unsafe { cat_dataset_shape(ds, &mut len, &mut dim) }, CatStatus::Ok);
    let reference = gen_dataset(DatasetKind::Gauss2d, 7);
    assert_eq!((len, dim), (reference.samples.len(), 2));

    let mut buf = [0.0; 2];
    let mut label = usize::MAX;
    for i in [0, len / 2, len - 1] {
        assert_eq!(unsafe { cat_dataset_sample(ds, i, buf.as_mut_ptr(), 2, &mut label) }, CatStatus::Ok);
        assert_eq!(buf.to_vec(), reference.samples[i]);
        assert_eq!(label, reference.labels[i]);
    }
    assert_eq!(unsafe { cat_dataset_sample(ds, len, buf.as_mut_ptr(), 2, &mut label) }, CatStatus::InvalidArgument);
    assert_eq!(unsafe { cat_dataset_sample(ds, 0, buf.as_mut_ptr(), 3, &mut label) }, CatStatus::InvalidArgument);
    unsafe { cat_dataset_free(ds) };
    unsafe { cat_dataset_free(ptr::null_mut()) };
}

const TINY: &str = r#"
[dataset]
kind = "gauss2d"
seed = 3
per_class = 200
identities = 1
identity_pool = 200

[pretrain]
steps = 300
hidden = [32, 32]

[pretrain.schedule]
steps = 50

[encoder]
steps = 600
input_noise = 0.05

[train]
steps = 10
rank = 2
lr = 0.001

[experiment]
concepts = 1
eval_samples = 4
"#;

#[test]
fn experiment_open_run_and_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let out_dir = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();

    let mut exp = ptr::null_mut();
    assert_eq!(
        unsafe { cat_experiment_open(cfg.as_ptr(), out_dir.as_ptr(), &mut exp) },
        CatStatus::Ok,
        "{}",
        last_error()
    );
    assert!(dir.path().join("out/base.ckpt").exists());

    let mode = CString::new("cat").unwrap();
    let mut m = CatMetrics::default();
    assert_eq!(
        unsafe { cat_experiment_run(exp, mode.as_ptr(), 0.5, 1, 10, 1e-3, &mut m) },
        CatStatus::Ok,
        "{}",
        last_error()
    );
    for v in [m.prompt_score, m.identity_score, m.kps] {
        assert!(v.is_finite() && (-1.0..=1.0).contains(&v), "{m:?}");
    }

    let bad = CString::new("dreambooth").unwrap();
    assert_eq!(unsafe { cat_experiment_run(exp, bad.as_ptr(), 0.5, 1, 10, 1e-3, &mut m) }, CatStatus::InvalidArgument);
    assert_eq!(unsafe { cat_experiment_run(exp, mode.as_ptr(), -1.0, 1, 10, 1e-3, &mut m) }, CatStatus::Config);

    // reopening loads the written checkpoints and reproduces the run
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { cat_experiment_open(cfg.as_ptr(), out_dir.as_ptr(), &mut again) }, CatStatus::Ok);
    let mut m2 = CatMetrics::default();
    assert_eq!(unsafe { cat_experiment_run(again, mode.as_ptr(), 0.5, 1, 10, 1e-3, &mut m2) }, CatStatus::Ok);
    assert_eq!(m, m2);
    unsafe {
        cat_experiment_free(exp);
        cat_experiment_free(again);
    }
}

#[test]
fn missing_config_file_is_an_io_error() {
    let path = CString::new("/nonexistent/cat.toml").unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { cat_experiment_open(path.as_ptr(), ptr::null(), &mut exp) }, CatStatus::Io);
    assert!(exp.is_null());
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cat_ffi.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["cat_last_error_message", "cat_dataset_generate", "cat_kps_features", "cat_experiment_run"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"cat_ffi.h\"\nint main(void) { CatMetrics m; (void)m; return CAT_STATUS_OK; }\n")
        .unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-I").arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available, skipping syntax check: {e}"),
    }
}
