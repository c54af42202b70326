fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let out = std::path::Path::new(&crate_dir).join("include/mdam.h");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("MDAM_H".to_string()),
        header: Some("/* C interface to the mdam nonresponse modeling library. */".to_string()),
        cpp_compat: true,
        documentation: true,
        ..Default::default()
    };
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(out);
        }
        Err(e) => {
            // Header generation is best effort; the committed header stays.
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
