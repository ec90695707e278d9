//! Save a model with its optimizer state, load it back and confirm every
//! tensor survives bit for bit.

use jet::data_io::{load_checkpoint, synth_dataset, SynthKind};
use jet::flow::{build_jet, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use jet::patchify::PatchGeometry;
use jet::training::{load_state, save_state, train, TrainConfig, TrainOutputs};
use jet::vit::ViTTemplate;

fn main() -> jet::error::Result<()> {
    let cfg = JetConfig {
        num_couplings: 3,
        channel_ratio: ChannelRatio::Ratio(2),
        spatial_policy: SpatialPolicy::RowOnly,
        vit: ViTTemplate::new(1, 16, 2),
        geom: PatchGeometry::new(4, 4, 3, 2)?,
        mode: Default::default(),
        seed: 8,
    };
    let data = synth_dataset(SynthKind::GaussianBlobs, 32, (4, 4, 3), 1)?;
    let tc = TrainConfig {
        steps: Some(5),
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut model: JetModel<f64> = build_jet(&cfg)?;
    let report = train(&mut model, &data, &tc, None, &TrainOutputs::default())?;

    let path = std::env::temp_dir().join("jet_roundtrip.jetf");
    save_state(&path, &model, &tc, Some(&report.opt), 5, "example run")?;
    let ck = load_checkpoint(&path)?;
    println!(
        "step {} with {} tensors; config blob:\n{}",
        ck.step,
        ck.tensors.len(),
        ck.config
    );

    let back = load_state::<f64>(&path)?;
    let same = back
        .model
        .params()
        .iter()
        .zip(model.params().iter())
        .all(|(a, b)| a.value == b.value);
    let opt_same = back
        .opt
        .is_some_and(|o| o.m == report.opt.m && o.v == report.opt.v);
    println!("parameters identical: {same}, optimizer identical: {opt_same}");
    Ok(())
}
