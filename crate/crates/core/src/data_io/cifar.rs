//! CIFAR-10 binary batches.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 32×32 red
//! plane, then green, then blue, each row-major. Labels are dropped.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{JetError, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 1024;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Decode one batch file's bytes to interleaved `32×32×3` images.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(JetError::format(
            path,
            format!(
                "size {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let planes = &rec[1..];
        for i in 0..1024 {
            out.extend([planes[i], planes[1024 + i], planes[2048 + i]]);
        }
    }
    Ok(out)
}

/// Load the train (five batches) or validation (test batch) split from
/// `dir`, or from `dir/cifar-10-batches-bin` if that is where the files are.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let root = resolve_root(dir);
    let names: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Validation => vec![CIFAR_TEST_FILE],
    };
    let mut pixels = Vec::new();
    for name in names {
        let path = root.join(name);
        if !path.is_file() {
            return Err(JetError::Data(format!(
                "CIFAR-10 batch file not found: {}",
                path.display()
            )));
        }
        let bytes = fs::read(&path).map_err(|e| JetError::io(&path, e))?;
        pixels.extend(parse_cifar_batch(&bytes, &path)?);
    }
    let n = pixels.len() / 3072;
    Dataset::new(
        n,
        (32, 32, 3),
        pixels,
        split,
        format!("cifar10:{}", root.display()),
    )
}

fn resolve_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR_TEST_FILE).exists()
        && !dir.join(CIFAR_TRAIN_FILES[0]).exists()
        && nested.is_dir()
    {
        nested
    } else {
        dir.to_path_buf()
    }
}
