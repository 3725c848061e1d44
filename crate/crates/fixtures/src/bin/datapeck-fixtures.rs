//! Writes the bundled type 2 diabetes dataset to a directory.

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("t2d-fixture"));
    datapeck_fixtures::t2d::write_to(&dir)?;
    println!("{}", dir.display());
    Ok(())
}
