use std::ffi::{c_char, CString};
use std::ptr;

use altermoma_ffi::*;

const SMALL: &str = r#"
seed = 3
[data]
n_train = 192
n_val = 64
[pretrain]
epochs = 2
[train]
epochs = 2
[finetune]
epochs = 1
[prune]
rho = 0.5
eval_batches = 2
reactivation_batches = 4
"#;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { am_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_config() -> *mut AmConfig {
    let text = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { am_config_from_toml(text.as_ptr(), &mut cfg) },
        AmStatus::Ok,
        "{}",
        last_error()
    );
    cfg
}

#[test]
fn null_and_bad_arguments_return_codes() {
    unsafe {
        assert_eq!(
            am_config_set_seed(ptr::null_mut(), 1),
            AmStatus::NullPointer
        );
        assert!(last_error().contains("config"));
        let cfg = am_config_default();
        assert_eq!(am_config_set_rho(cfg, 1.0), AmStatus::Config);
        assert_eq!(am_config_set_rho(cfg, 0.75), AmStatus::Ok);
        let mut short = [0 as c_char; 10];
        assert_eq!(
            am_config_hash(cfg, short.as_mut_ptr(), short.len()),
            AmStatus::InvalidArgument
        );
        let bad = CString::new("seed = \"x\"").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(
            am_config_from_toml(bad.as_ptr(), &mut out),
            AmStatus::Config
        );
        assert!(out.is_null());
        let missing = CString::new("/nonexistent/dir/model.bin").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(
            am_model_load(missing.as_ptr(), cfg, &mut model),
            AmStatus::Io
        );
        am_config_free(cfg);
        am_config_free(ptr::null_mut());
        assert_eq!(am_model_num_params(ptr::null()), 0);
    }
}

#[test]
fn hash_changes_with_overrides() {
    unsafe {
        let cfg = am_config_default();
        let mut a = [0 as c_char; 65];
        let mut b = [0 as c_char; 65];
        assert_eq!(am_config_hash(cfg, a.as_mut_ptr(), a.len()), AmStatus::Ok);
        am_config_set_seed(cfg, 99);
        am_config_hash(cfg, b.as_mut_ptr(), b.len());
        assert_eq!(a[64], 0);
        assert_ne!(a, b);
        am_config_free(cfg);
    }
}

#[test]
fn train_prune_save_load_round_trip() {
    unsafe {
        let cfg = small_config();
        let mut ds = ptr::null_mut();
        assert_eq!(am_dataset_generate(cfg, &mut ds), AmStatus::Ok);
        assert_eq!(am_dataset_len(ds), 256);
        let mut model = ptr::null_mut();
        assert_eq!(
            am_model_train(cfg, &mut model),
            AmStatus::Ok,
            "{}",
            last_error()
        );
        let n = am_model_num_params(model);
        assert_eq!(am_model_kept_params(model), n);

        let bogus = CString::new("lottery").unwrap();
        let (mut pruned, mut ledger) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            am_prune(cfg, model, ds, bogus.as_ptr(), &mut pruned, &mut ledger),
            AmStatus::UnknownMethod
        );

        let method = CString::new("altermoma").unwrap();
        assert_eq!(
            am_prune(cfg, model, ds, method.as_ptr(), &mut pruned, &mut ledger),
            AmStatus::Ok,
            "{}",
            last_error()
        );
        let k = (0.5 * n as f64).round() as usize;
        assert_eq!(am_model_kept_params(pruned), k);
        assert_eq!(am_ledger_len(ledger), n);
        assert_eq!(am_ledger_kept(ledger), k);
        let mut loss = f64::NAN;
        assert_eq!(am_model_val_loss(cfg, pruned, ds, &mut loss), AmStatus::Ok);
        assert!(loss.is_finite());

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
        let csv = CString::new(dir.path().join("l.csv").to_str().unwrap()).unwrap();
        assert_eq!(am_model_save(pruned, path.as_ptr()), AmStatus::Ok);
        assert_eq!(am_ledger_write_csv(ledger, csv.as_ptr()), AmStatus::Ok);
        assert!(
            std::fs::read_to_string(dir.path().join("l.csv"))
                .unwrap()
                .lines()
                .count()
                > n
        );
        let mut loaded = ptr::null_mut();
        assert_eq!(am_model_load(path.as_ptr(), cfg, &mut loaded), AmStatus::Ok);

        let (mut il, mut ic, mut o) = (0, 0, 0);
        assert_eq!(
            am_model_dims(loaded, &mut il, &mut ic, &mut o),
            AmStatus::Ok
        );
        let rows = 3;
        let xl: Vec<f64> = (0..rows * il).map(|i| (i as f64 * 0.37).sin()).collect();
        let xc: Vec<f64> = (0..rows * ic).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut y1 = vec![0.0; rows * o];
        let mut y2 = vec![0.0; rows * o];
        assert_eq!(
            am_model_predict(
                pruned,
                xl.as_ptr(),
                xc.as_ptr(),
                rows,
                y1.as_mut_ptr(),
                y1.len()
            ),
            AmStatus::Ok
        );
        assert_eq!(
            am_model_predict(
                loaded,
                xl.as_ptr(),
                xc.as_ptr(),
                rows,
                y2.as_mut_ptr(),
                y2.len()
            ),
            AmStatus::Ok
        );
        assert_eq!(y1, y2);
        assert_eq!(
            am_model_predict(loaded, xl.as_ptr(), xc.as_ptr(), rows, y2.as_mut_ptr(), 1),
            AmStatus::InvalidArgument
        );

        am_model_free(loaded);
        am_ledger_free(ledger);
        am_model_free(pruned);
        am_model_free(model);
        am_dataset_free(ds);
        am_config_free(cfg);
    }
}
