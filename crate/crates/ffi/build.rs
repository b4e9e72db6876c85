use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml")).expect("reading cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generating C bindings");
    let mut header = Vec::new();
    bindings.write(&mut header);
    let out = crate_dir.join("include").join("ham.h");
    // Rewriting an unchanged header would retrigger dependent builds.
    if std::fs::read(&out).ok().as_deref() != Some(&header[..]) {
        std::fs::create_dir_all(out.parent().unwrap()).unwrap();
        std::fs::write(&out, header).unwrap();
    }
}
