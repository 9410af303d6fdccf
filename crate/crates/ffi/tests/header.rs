use std::path::{Path, PathBuf};
use std::process::Command;

const SYMBOLS: &[&str] = &[
    "uktl_version",
    "uktl_last_error",
    "uktl_string_free",
    "uktl_tensor_new",
    "uktl_tensor_free",
    "uktl_tensor_order",
    "uktl_tensor_len",
    "uktl_tensor_dims",
    "uktl_tensor_values",
    "uktl_tensor_decode",
    "uktl_tensor_encode",
    "uktl_tensor_frobenius_norm",
    "uktl_tensor_kernel",
    "uktl_model_load",
    "uktl_model_load_json",
    "uktl_model_free",
    "uktl_model_num_classes",
    "uktl_model_label",
    "uktl_model_forward",
    "uktl_model_predict",
];

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/uktl.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for sym in SYMBOLS {
        assert!(text.contains(&format!("{sym}(")), "{sym} missing from header");
    }
    for item in ["typedef struct UktlTensor UktlTensor;", "typedef struct UktlModel UktlModel;", "UKTL_STATUS_OK = 0"] {
        assert!(text.contains(item), "{item}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/header-xxxx -> target/<profile>/libuktl_ffi.a
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libuktl_ffi.a");
    lib.exists().then_some(lib)
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "uktl.h"

int main(void) {
    size_t dims[2] = {2, 3};
    double vals[6] = {1, 0, 0, 0, 1, 0};
    UktlTensor *t = NULL;
    if (uktl_tensor_new(dims, 2, vals, 6, &t) != UKTL_STATUS_OK) return 10;
    double k = 0.0;
    if (uktl_tensor_kernel(t, t, 1, 1.0, 0.5, UKTL_COMBINE_SUM_PRODUCT, &k) != UKTL_STATUS_OK) return 11;
    /* two unit factors: 0.5 * 2 + 0.5 * 1 */
    if (k < 1.5 - 1e-12 || k > 1.5 + 1e-12) return 12;
    char *text = NULL;
    if (uktl_tensor_encode(t, &text) != UKTL_STATUS_OK) return 13;
    uktl_string_free(text);
    UktlModel *m = NULL;
    if (uktl_model_load_json("{}", &m) == UKTL_STATUS_OK) return 14;
    if (uktl_last_error() == NULL || strlen(uktl_last_error()) == 0) return 15;
    uktl_tensor_free(t);
    printf("%s\n", uktl_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let Some(lib) = static_lib() else {
        eprintln!("skipping: static library not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "smoke exited {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
