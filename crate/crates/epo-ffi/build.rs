//! Regenerates include/epo.h from the exported signatures on every build.

use std::path::Path;

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets CARGO_MANIFEST_DIR");
    let header = Path::new(&crate_dir).join("include").join("epo.h");
    cbindgen::generate(&crate_dir)
        .expect("cbindgen reads cbindgen.toml and src/lib.rs")
        .write_to_file(header);
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
