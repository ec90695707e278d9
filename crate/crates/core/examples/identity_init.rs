//! A freshly built flow is the identity map with zero log-determinant, so
//! its bits per dimension on uniform pixels sit at the analytic baseline.

use jet::data_io::{synth_dataset, SynthKind};
use jet::flow::{
    build_jet, uniform_baseline_bpd, ChannelRatio, JetConfig, JetModel, SpatialPolicy,
};
use jet::patchify::PatchGeometry;
use jet::rng::{normal_tensor, rng_for};
use jet::training::evaluate;
use jet::vit::ViTTemplate;

fn main() -> jet::error::Result<()> {
    let cfg = JetConfig {
        num_couplings: 6,
        channel_ratio: ChannelRatio::Ratio(1),
        spatial_policy: SpatialPolicy::AlternateAll,
        vit: ViTTemplate::new(1, 32, 4),
        geom: PatchGeometry::new(8, 8, 3, 2)?,
        mode: Default::default(),
        seed: 0,
    };
    let model: JetModel<f32> = build_jet(&cfg)?;
    println!("layers: {:?}", model.kinds());

    let g = cfg.geom;
    let x = normal_tensor::<f32>(&mut rng_for(1, &[]), &[4, g.tokens(), g.token_width()], 0.3);
    let r = model.flow_forward(&x)?;
    println!("z == x: {}, logdet: {:?}", r.z == x, r.logdet);

    let data = synth_dataset(SynthKind::UNIFORM, 4096, (8, 8, 3), 7)?;
    let bpd = evaluate(&model, &data, 0, 0, 512)?;
    println!(
        "uniform pixels: {bpd:.4} bpd (analytic {:.4})",
        uniform_baseline_bpd()
    );
    Ok(())
}
