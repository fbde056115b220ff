//! The generated header compiles as C and as C++ against a program that
//! uses every entry point.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "convtrans.h"

int run(const char *path) {
    double xs[64];
    size_t lens[1] = {64};
    double out[5];
    size_t width = 0;
    CtModel *m = NULL;
    if (ct_generate(2, 1.0, 64, 7, INFINITY, xs, 64) != CT_STATUS_OK) {
        fprintf(stderr, "%s\n", ct_last_error());
        return 1;
    }
    if (ct_model_load(path, &m) != CT_STATUS_OK) return 2;
    ct_model_output_len(m, &width);
    CtStatus s = ct_model_predict(m, xs, lens, 1, out, 5);
    ct_model_free(m);
    printf("%s %zu %d\n", ct_version(), width, (int)s);
    return s == CT_STATUS_OK ? 0 : 3;
}
"#;

fn compiles(compiler: &str, lang: &str) {
    let Ok(probe) = Command::new(compiler).arg("--version").output() else {
        eprintln!("{compiler} not available; skipping");
        return;
    };
    assert!(probe.status.success());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("prog.txt");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(compiler)
        .args(["-x", lang, "-Wall", "-Wextra", "-Werror", "-c", "-o"])
        .arg(dir.path().join("prog.o"))
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_compiles_as_c() {
    compiles("cc", "c");
}

#[test]
fn header_compiles_as_cpp() {
    compiles("c++", "c++");
}
