//! Forward then inverse through a deep flow with random output heads, in
//! both coupling modes and both float widths.

use jet::coupling::CouplingMode;
use jet::flow::{build_jet, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use jet::numerics::{Float, Tensor};
use jet::patchify::PatchGeometry;
use jet::rng::{normal_tensor, rng_for};
use jet::vit::ViTTemplate;

fn round_trip<F: Float>(cfg: &JetConfig) -> jet::error::Result<f64> {
    let mut model: JetModel<F> = build_jet(cfg)?;
    model.randomize_heads(0.05, 3);
    let g = cfg.geom;
    let x: Tensor<F> = normal_tensor(
        &mut rng_for(9, &[]),
        &[100, g.tokens(), g.token_width()],
        0.5,
    );
    let z = model.flow_forward(&x)?.z;
    Ok(model.flow_inverse(&z)?.max_abs_diff(&x).as_f64())
}

fn main() -> jet::error::Result<()> {
    for mode in [CouplingMode::Pairing, CouplingMode::Masking] {
        let cfg = JetConfig {
            num_couplings: 32,
            channel_ratio: ChannelRatio::Ratio(1),
            spatial_policy: SpatialPolicy::AlternateAll,
            vit: ViTTemplate::new(2, 64, 4),
            geom: PatchGeometry::new(4, 8, 3, 2)?,
            mode,
            seed: 5,
        };
        println!(
            "{mode:?}: f32 max error {:.2e}, f64 max error {:.2e}",
            round_trip::<f32>(&cfg)?,
            round_trip::<f64>(&cfg)?
        );
    }
    Ok(())
}
