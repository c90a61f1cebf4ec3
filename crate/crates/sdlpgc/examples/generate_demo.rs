//! Generate a synthetic SST-like dataset in the crate's CSV format.
//!
//! ```text
//! cargo run --example generate_demo -- demo-data [nodes] [days] [seed]
//! ```

use sd_lpgc::data::synthetic;
use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().unwrap_or_else(|| "demo-data".into()).into();
    let nodes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);
    let days: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let ds = synthetic::sst_like("demo", nodes, days, seed);
    match synthetic::write_csv_files(&ds, &out) {
        Ok(descriptor) => {
            println!("wrote {} nodes x {} days", nodes, days);
            println!("descriptor: {}", descriptor.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
