//! Datasets, checkpoints and image output.

mod checkpoint;
mod cifar;
mod image_out;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, NamedTensor,
    TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{
    load_cifar10, parse_cifar_batch, CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use image_out::write_pnm;
pub use synth::{synth_dataset, SynthKind};

use crate::error::{JetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// `n` images of `height × width × channels` interleaved `u8` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        n: usize,
        (height, width, channels): (usize, usize, usize),
        pixels: Vec<u8>,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(JetError::Data("dataset is empty".into()));
        }
        if pixels.len() != n * height * width * channels {
            return Err(JetError::Data(format!(
                "{} pixel bytes for {n} images of {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Dataset {
            n,
            height,
            width,
            channels,
            pixels,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let l = self.image_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.n);
        Dataset::new(
            n,
            (self.height, self.width, self.channels),
            self.pixels[..n * self.image_len()].to_vec(),
            self.split,
            format!("{} (first {n})", self.provenance),
        )
    }
}

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        JetError::io(path, e)
    })
}
