//! Train briefly on stripes, then draw a few images and write them as PPM.

use std::path::PathBuf;

use jet::data_io::{synth_dataset, write_pnm, SynthKind};
use jet::flow::{build_jet, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use jet::patchify::PatchGeometry;
use jet::training::{train, TrainConfig, TrainOutputs};
use jet::vit::ViTTemplate;

fn main() -> jet::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("jet_samples"));
    let cfg = JetConfig {
        num_couplings: 4,
        channel_ratio: ChannelRatio::Ratio(1),
        spatial_policy: SpatialPolicy::AlternateAll,
        vit: ViTTemplate::new(1, 32, 4),
        geom: PatchGeometry::new(8, 8, 3, 2)?,
        mode: Default::default(),
        seed: 0,
    };
    let data = synth_dataset(SynthKind::Stripes, 256, (8, 8, 3), 2)?;
    let mut model: JetModel<f32> = build_jet(&cfg)?;
    let tc = TrainConfig {
        steps: Some(150),
        batch_size: 64,
        warmup_steps: 10,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &tc, None, &TrainOutputs::default())?;
    println!("final {}", report.metrics.last().expect("steps"));

    std::fs::create_dir_all(&out).map_err(|e| jet::error::JetError::Io {
        path: out.clone(),
        source: e,
    })?;
    let samples = model.sample(8, 1)?;
    for (i, img) in samples.images.chunks(8 * 8 * 3).enumerate() {
        write_pnm(&out.join(format!("sample_{i:04}.ppm")), 8, 8, 3, img)?;
    }
    println!("wrote 8 samples to {}", out.display());
    Ok(())
}
