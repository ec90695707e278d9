//! Load CIFAR-10 from its binary distribution and report basic statistics.
//!
//!     cargo run --release --example cifar10_loader -- /path/to/cifar-10-batches-bin

use std::path::PathBuf;

use jet::data_io::{load_cifar10, Split};

fn main() -> jet::error::Result<()> {
    let Some(dir) = std::env::args().nth(1).map(PathBuf::from) else {
        eprintln!("usage: cifar10_loader <dir with data_batch_*.bin and test_batch.bin>");
        std::process::exit(2);
    };
    for split in [Split::Train, Split::Validation] {
        let d = load_cifar10(&dir, split)?;
        let mean = d.pixels.iter().map(|&p| p as f64).sum::<f64>() / d.pixels.len() as f64;
        println!(
            "{split:?}: {} images of {}x{}x{}, mean pixel {mean:.2}",
            d.len(),
            d.height,
            d.width,
            d.channels
        );
    }
    Ok(())
}
