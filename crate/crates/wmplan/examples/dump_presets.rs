//! Regenerates the shipped preset files in `configs/` from the built-in
//! presets, so the files on disk never drift from the code:
//!
//! ```text
//! cargo run -p wmplan --example dump_presets
//! ```

use std::path::Path;

use wmplan::config::RunConfig;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    std::fs::create_dir_all(&root).expect("create configs dir");
    for (name, cfg) in [
        ("wall_base.toml", RunConfig::wall_base()),
        ("pointmass_base.toml", RunConfig::pointmass_base()),
    ] {
        let path = root.join(name);
        cfg.save(&path).expect("write preset");
        println!("wrote {}", path.display());
    }
}
