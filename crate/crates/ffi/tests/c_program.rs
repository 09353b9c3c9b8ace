//! Builds a small C program against the generated header and shared library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "gancomp.h"

int main(int argc, char **argv) {
    GcGenerator *g = NULL;
    char msg[128];
    if (gc_generator_load("/definitely/missing.ckpt", &g) == GC_STATUS_OK) return 1;
    gc_last_error_message(msg, sizeof msg);
    if (gc_generator_load(argv[1], &g) != GC_STATUS_OK) return 2;
    size_t latent = 0, res = 0;
    uint64_t flops = 0;
    if (gc_generator_info(g, &latent, &res, NULL, &flops) != GC_STATUS_OK) return 3;
    float z[8] = {0};
    float img[3 * 32 * 32];
    if (gc_generator_generate(g, z, 1, img) != GC_STATUS_OK) return 4;
    gc_generator_free(g);
    printf("%zu %zu %s\n", latent, res, gc_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    // target/<profile>/deps/<test binary>
    let lib_dir: PathBuf = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    if !lib_dir.join("libgancomp_ffi.so").exists() && !lib_dir.join("libgancomp_ffi.dylib").exists()
    {
        panic!("shared library not found in {}", lib_dir.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = Command::new("cc")
        .arg(&src)
        .arg(format!("-I{include}"))
        .arg(format!("-L{}", lib_dir.display()))
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lgancomp_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());

    let g =
        gancomp::model::Generator::<f32>::new(gancomp::model::GeneratorSpec::toy(8, [8, 8, 4]), 1)
            .unwrap();
    let ckpt = dir.path().join("g.ckpt");
    gancomp::model::ModelCheckpoint::from_generator(&g)
        .save(&ckpt)
        .unwrap();
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        format!("8 32 {}\n", env!("CARGO_PKG_VERSION"))
    );
}
