use clap::Parser;

use atachic::cli::{run, RunManifest};

fn main() {
    let manifest = RunManifest::parse();
    match run(&manifest) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
