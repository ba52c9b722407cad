//! Generates `include/t3.h` from the public `extern "C"` surface.

use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("t3.h");
    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.include_guard = Some("T3_H".to_string());
    config.cpp_compat = true;
    config.documentation = true;
    config.enumeration.prefix_with_name = true;
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(header);
        }
        Err(err) => {
            // Keep the previously generated header if parsing hiccups;
            // fail loudly only when none exists.
            println!("cargo:warning=cbindgen failed: {err}");
            assert!(header.exists(), "no header available and cbindgen failed");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
