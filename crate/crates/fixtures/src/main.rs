use std::path::PathBuf;
use std::process::ExitCode;

use groundeval_fixtures::{build_table_fixture, table_fixture_dir};

fn main() -> ExitCode {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(table_fixture_dir);
    let fixture = match build_table_fixture() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("cannot solve fixture: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = fixture.write(&dir) {
        eprintln!("cannot write {}: {e}", dir.display());
        return ExitCode::from(1);
    }
    println!("wrote {} files to {}", fixture.files.len(), dir.display());
    ExitCode::SUCCESS
}
