//! Overfit a small flow on 64 synthetic blob images and watch the bits per
//! dimension fall. Pass a directory to also write metrics and a checkpoint.

use std::path::PathBuf;

use jet::data_io::{synth_dataset, SynthKind};
use jet::flow::{build_jet, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use jet::patchify::PatchGeometry;
use jet::training::{train, Preset, TrainConfig, TrainOutputs};
use jet::vit::ViTTemplate;

fn main() -> jet::error::Result<()> {
    jet::numerics::init_thread_pool_from_env();
    let cfg = JetConfig {
        num_couplings: 4,
        channel_ratio: ChannelRatio::Ratio(1),
        spatial_policy: SpatialPolicy::AlternateAll,
        vit: ViTTemplate::new(1, 32, 4),
        geom: PatchGeometry::new(8, 8, 3, 2)?,
        mode: Default::default(),
        seed: 0,
    };
    let data = synth_dataset(SynthKind::GaussianBlobs, 64, (8, 8, 3), 11)?;
    let tc = TrainConfig {
        steps: Some(200),
        batch_size: 64,
        ..TrainConfig::preset(Preset::PaperStrict)
    };
    let outputs = TrainOutputs {
        dir: std::env::args().nth(1).map(PathBuf::from),
        extra_config: "blobs x64".into(),
    };

    let mut model: JetModel<f32> = build_jet(&cfg)?;
    let report = train(&mut model, &data, &tc, None, &outputs)?;
    for rec in report
        .metrics
        .iter()
        .step_by(25)
        .chain(report.metrics.last())
    {
        println!("{rec}");
    }
    Ok(())
}
