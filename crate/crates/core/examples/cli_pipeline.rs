//! The file-based stages driven from code, exactly as the `hybrid-ident`
//! binary runs them. Pass a config path to use it instead of the small
//! bundled one.

use std::path::PathBuf;

use hybrid_ident::cli::{run, Command, Opts};

fn main() {
    let config = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/cstr_small.toml"));
    let out = std::env::temp_dir().join("hybrid-ident-pipeline");
    let opts = Opts {
        config: Some(config),
        out: Some(out.clone()),
        ..Opts::default()
    };
    if let Err(e) = run(Command::Pipeline, &opts, &mut |line| println!("{line}")) {
        eprintln!("error[{}]: {e}", e.category().as_str());
        std::process::exit(e.category().exit_code());
    }
    println!("artifacts in {}", out.display());
}
