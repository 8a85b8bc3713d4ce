//! `imgstats INPUT OUTPUT`: writes results.tsv with file and pixel counts.

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let [input, output] = &args[..] else {
        eprintln!("usage: imgstats INPUT OUTPUT");
        return ExitCode::from(2);
    };
    match chips_service::imgstats::run(input, output) {
        Ok(s) => {
            println!("{} files, {} voxel bytes", s.file_count, s.voxel_bytes);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("imgstats: {e}");
            ExitCode::FAILURE
        }
    }
}
