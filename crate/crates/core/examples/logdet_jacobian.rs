//! Compare the analytic log-determinant of a small flow with the log of a
//! finite-difference Jacobian determinant.

use jet::flow::{build_jet, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use jet::numerics::Tensor;
use jet::patchify::PatchGeometry;
use jet::rng::{normal_tensor, rng_for};
use jet::verify::{fd_jacobian, log_abs_det};
use jet::vit::ViTTemplate;

fn main() -> jet::error::Result<()> {
    let cfg = JetConfig {
        num_couplings: 2,
        channel_ratio: ChannelRatio::Ratio(1),
        spatial_policy: SpatialPolicy::CheckerOnly,
        vit: ViTTemplate::new(1, 16, 2),
        geom: PatchGeometry::new(2, 2, 2, 1)?,
        mode: Default::default(),
        seed: 1,
    };
    let mut model: JetModel<f64> = build_jet(&cfg)?;
    model.randomize_heads(0.3, 4);
    for trial in 0..5 {
        let x: Tensor<f64> = normal_tensor(&mut rng_for(trial, &[]), &[4, 2], 0.5);
        let analytic = model.flow_forward(&x)?.logdet[0];
        let jac = fd_jacobian(x.data(), 1e-5, |p| {
            let t = Tensor::new(&[4, 2], p.to_vec()).expect("shape");
            model.flow_forward(&t).expect("forward").z.into_data()
        });
        let numeric = log_abs_det(&jac, 8);
        println!(
            "trial {trial}: analytic {analytic:+.8} numeric {numeric:+.8} diff {:.1e}",
            (analytic - numeric).abs()
        );
    }
    Ok(())
}
