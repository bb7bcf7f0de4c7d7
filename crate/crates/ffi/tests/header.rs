use std::path::Path;
use std::process::Command;

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("smoothcert.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["smc_model_load", "smc_certify", "smc_predict", "smc_clopper_pearson_lower", "SMC_STATUS_BAD_CHECKPOINT"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"smoothcert.h\"\nint main(void) { SmcParams p = smc_default_params(0.25, 1); return p.n == 10000 ? 0 : 1; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = Command::new(compiler)
            .args(extra)
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not available; skipped"),
        }
    }
}
