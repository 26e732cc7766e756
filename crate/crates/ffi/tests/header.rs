use std::path::Path;
use std::process::Command;

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/altermoma.h"))
        .unwrap()
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for name in [
        "typedef struct AmConfig AmConfig;",
        "typedef struct AmModel AmModel;",
        "AM_STATUS_PANIC = 8",
        "am_last_error_message(",
        "am_config_from_toml(",
        "am_dataset_generate(",
        "am_model_train(",
        "am_model_predict(",
        "am_prune(",
        "am_ledger_write_csv(",
    ] {
        assert!(h.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"altermoma.h\"\nint main(void) { AmConfig *c = am_config_default(); am_config_free(c); return AM_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}
