//! The full flow: a stack of couplings between patch tokens and a standard
//! normal latent.
//!
//! Layers come in groups of `M` channel couplings followed by one spatial
//! coupling. When `N` is not a multiple of `M + 1` the last group is cut
//! short, so it holds only channel layers.

use std::f64::consts::{LN_2, PI};
use std::fmt;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::coupling::{batch_view, CouplingLayer, CouplingMode, Fault};
use crate::error::{JetError, Result};
use crate::numerics::{Float, ParamStore, Tape, Tensor, Var};
use crate::patchify::{unpatchify, PatchGeometry};
use crate::rng::{self, derive_seed, JetRng};
use crate::splitting::{build_channel_plan, build_spatial_plan, SplitKind};
use crate::vit::ViTTemplate;

/// Bits added to every dimension by rescaling `[0, 256)` to `[-0.5, 0.5)`.
pub const RESCALE_BITS: f64 = 8.0;

/// Identity model on uniform `[-0.5, 0.5)` inputs:
/// `8 + ½·log2(2π) + (1/24)/ln 2`.
pub fn uniform_baseline_bpd() -> f64 {
    RESCALE_BITS + 0.5 * (2.0 * PI).log2() + (1.0 / 24.0) / LN_2
}

/// Differential entropy of a standard normal in bits, `½·log2(2πe)`.
pub fn gaussian_entropy_bits() -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E).log2()
}

/// How many channel couplings precede each spatial one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RatioRepr", into = "RatioRepr")]
pub enum ChannelRatio {
    /// `M` channel layers then one spatial layer. `M = 0` is all spatial.
    Ratio(usize),
    AllChannel,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RatioRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<RatioRepr> for ChannelRatio {
    type Error = String;

    fn try_from(r: RatioRepr) -> std::result::Result<Self, String> {
        match r {
            RatioRepr::Count(m) => Ok(ChannelRatio::Ratio(m)),
            RatioRepr::Name(s) if s == "all_channel" => Ok(ChannelRatio::AllChannel),
            RatioRepr::Name(s) => Err(format!(
                "channel_ratio must be an integer or \"all_channel\", got {s:?}"
            )),
        }
    }
}

impl From<ChannelRatio> for RatioRepr {
    fn from(r: ChannelRatio) -> Self {
        match r {
            ChannelRatio::Ratio(m) => RatioRepr::Count(m),
            ChannelRatio::AllChannel => RatioRepr::Name("all_channel".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPolicy {
    RowOnly,
    ColOnly,
    CheckerOnly,
    /// Row, then column, then checkerboard, repeating.
    AlternateAll,
}

impl SpatialPolicy {
    fn kind(self, nth_spatial: usize) -> SplitKind {
        match self {
            SpatialPolicy::RowOnly => SplitKind::RowWise,
            SpatialPolicy::ColOnly => SplitKind::ColWise,
            SpatialPolicy::CheckerOnly => SplitKind::Checkerboard,
            SpatialPolicy::AlternateAll => [
                SplitKind::RowWise,
                SplitKind::ColWise,
                SplitKind::Checkerboard,
            ][nth_spatial % 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetConfig {
    pub num_couplings: usize,
    pub channel_ratio: ChannelRatio,
    pub spatial_policy: SpatialPolicy,
    pub vit: ViTTemplate,
    pub geom: PatchGeometry,
    #[serde(default)]
    pub mode: CouplingMode,
    #[serde(default)]
    pub seed: u64,
}

impl JetConfig {
    /// Split kind of every layer, in order.
    pub fn schedule(&self) -> Vec<SplitKind> {
        schedule(self.num_couplings, self.channel_ratio, self.spatial_policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_couplings == 0 {
            return Err(JetError::config("num_couplings must be at least 1"));
        }
        self.geom.validate()?;
        let kinds = self.schedule();
        if kinds.contains(&SplitKind::Channel) && !self.geom.token_width().is_multiple_of(2) {
            return Err(JetError::config(format!(
                "channel couplings need an even token width, got {} (patch {} x {} channels)",
                self.geom.token_width(),
                self.geom.patch,
                self.geom.channels
            )));
        }
        if kinds.iter().any(|k| k.is_spatial())
            && (!self.geom.grid_h().is_multiple_of(2) || !self.geom.grid_w().is_multiple_of(2))
        {
            return Err(JetError::config(format!(
                "spatial couplings need an even patch grid, got {}x{}",
                self.geom.grid_h(),
                self.geom.grid_w()
            )));
        }
        Ok(())
    }
}

pub fn schedule(n: usize, ratio: ChannelRatio, policy: SpatialPolicy) -> Vec<SplitKind> {
    let m = match ratio {
        ChannelRatio::AllChannel => return vec![SplitKind::Channel; n],
        ChannelRatio::Ratio(m) => m,
    };
    let mut spatial = 0;
    (0..n)
        .map(|i| {
            if i % (m + 1) < m {
                SplitKind::Channel
            } else {
                spatial += 1;
                policy.kind(spatial - 1)
            }
        })
        .collect()
}

/// Latent and per-sample log-determinant (nats).
#[derive(Clone, Debug)]
pub struct FlowResult<F> {
    pub z: Tensor<F>,
    pub logdet: Vec<F>,
}

/// Output of [`JetModel::sample`].
#[derive(Clone, Debug)]
pub struct Samples<F> {
    /// `[count, H, W, C]` clamped and rounded pixels.
    pub images: Vec<u8>,
    /// Drawn latents, `[count, K, 2d]`.
    pub latents: Tensor<F>,
    /// Flow-space images before rescaling and clamping, `[count, K, 2d]`.
    pub flow_space: Tensor<F>,
}

#[derive(Clone)]
pub struct JetModel<F> {
    config: JetConfig,
    layers: Vec<CouplingLayer<F>>,
    params: ParamStore<F>,
}

impl<F: Float> fmt::Debug for JetModel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JetModel")
            .field("kinds", &self.kinds())
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

pub fn build_jet<F: Float>(cfg: &JetConfig) -> Result<JetModel<F>> {
    cfg.validate()?;
    let g = &cfg.geom;
    let mut params = ParamStore::new();
    let mut layers = Vec::with_capacity(cfg.num_couplings);
    for (i, kind) in cfg.schedule().into_iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[i as u64]);
        let plan = match kind {
            SplitKind::Channel => build_channel_plan(g.token_width(), seed)?,
            k => build_spatial_plan(g.grid_h(), g.grid_w(), k)?,
        };
        let layer = CouplingLayer::new(
            i,
            plan,
            &cfg.vit,
            cfg.mode,
            g.tokens(),
            g.token_width(),
            seed,
            &mut params,
            &format!("layer{i}"),
        )?;
        layers.push(layer);
    }
    Ok(JetModel {
        config: cfg.clone(),
        layers,
        params,
    })
}

impl<F: Float> JetModel<F> {
    pub fn config(&self) -> &JetConfig {
        &self.config
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.config.geom
    }

    pub fn layers(&self) -> &[CouplingLayer<F>] {
        &self.layers
    }

    pub fn kinds(&self) -> Vec<SplitKind> {
        self.layers.iter().map(|l| l.kind()).collect()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Total dimension `D = K · 2d`.
    pub fn dims(&self) -> usize {
        self.config.geom.dims()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        for l in &mut self.layers {
            l.set_fault(fault);
        }
    }

    /// Overwrite every output head with `N(0, std²)` draws, breaking the
    /// identity initialization. Used to test invertibility with nontrivial
    /// scales.
    pub fn randomize_heads(&mut self, std: f64, seed: u64) {
        for l in &self.layers {
            let (w, b) = l.vit().head_ids();
            for id in [w, b] {
                let mut r = rng::rng_for(seed, &[rng::stream::HEAD_RANDOMIZE, id.index() as u64]);
                let shape = self.params.value(id).shape().to_vec();
                let v = rng::normal_tensor(&mut r, &shape, std);
                self.params.set_value(id, v).expect("same shape");
            }
        }
    }

    /// Forward on the tape: `[B, K, 2d] -> (z, logdet [B])`.
    pub fn forward_var<'t>(
        &self,
        tape: &'t Tape<F>,
        x: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let mut h = x;
        let mut total: Option<Var<'t, F>> = None;
        for l in &self.layers {
            let (y, ld) = l.forward_var(tape, &self.params, h)?;
            h = y;
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
        }
        Ok((h, total.expect("at least one layer")))
    }

    /// Summed negative log-likelihood in nats over a batch, with every
    /// constant kept: `Σ ½(z² + ln 2π) − logdet`.
    pub fn nll_nats_var<'t>(&self, tape: &'t Tape<F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let batch = x.shape()[0];
        let (z, logdet) = self.forward_var(tape, x)?;
        let quad = z.square().sum_per_batch()?.scale(F::of(0.5));
        let constant = (batch * self.dims()) as f64 * 0.5 * (2.0 * PI).ln();
        Ok(quad
            .add(logdet.scale(-F::one()))?
            .sum()
            .add_const(F::of(constant)))
    }

    /// Mean negative log-likelihood in bits per dimension over a batch, as a
    /// differentiable scalar. With `raw` the rescaling term is left out.
    pub fn bpd_var<'t>(&self, tape: &'t Tape<F>, x: Var<'t, F>, raw: bool) -> Result<Var<'t, F>> {
        let batch = x.shape()[0];
        let nats = self.nll_nats_var(tape, x)?;
        let offset = if raw { 0.0 } else { RESCALE_BITS };
        Ok(nats
            .scale(F::of(1.0 / ((batch * self.dims()) as f64 * LN_2)))
            .add_const(F::of(offset)))
    }

    /// `[B, K, 2d]` or `[K, 2d]` to latent.
    pub fn flow_forward(&self, x: &Tensor<F>) -> Result<FlowResult<F>> {
        let (mut h, unbatch) = batch_view(x)?;
        let mut logdet = vec![F::zero(); h.shape()[0]];
        for l in &self.layers {
            let (y, ld) = l.forward(&self.params, &h)?;
            for (acc, v) in logdet.iter_mut().zip(ld) {
                *acc += v;
            }
            h = y;
        }
        let z = if unbatch { h.index_axis0(0) } else { h };
        Ok(FlowResult { z, logdet })
    }

    /// Latent back to data, undoing the layers in reverse order.
    pub fn flow_inverse(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let (mut h, unbatch) = batch_view(z)?;
        for l in self.layers.iter().rev() {
            h = l.inverse(&self.params, &h)?;
        }
        Ok(if unbatch { h.index_axis0(0) } else { h })
    }

    /// Mean bits per dimension of already dequantized tokens `[B, K, 2d]`.
    pub fn nll_bpd(&self, x: &Tensor<F>) -> Result<f64> {
        self.bpd(x, false)
    }

    /// Like [`nll_bpd`](Self::nll_bpd) without the `+8` rescaling term.
    pub fn nll_bpd_raw(&self, x: &Tensor<F>) -> Result<f64> {
        self.bpd(x, true)
    }

    /// Per-sample bits per dimension, `[B]`.
    pub fn bpd_per_sample(&self, x: &Tensor<F>) -> Result<Vec<f64>> {
        let (x, _) = batch_view(x)?;
        let r = self.flow_forward(&x)?;
        let d = self.dims();
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let out: Vec<f64> =
            r.z.data()
                .chunks(d)
                .zip(&r.logdet)
                .map(|(z, ld)| {
                    let quad: f64 = z.iter().map(|v| 0.5 * v.as_f64() * v.as_f64()).sum();
                    let nats = quad + d as f64 * half_ln_2pi - ld.as_f64();
                    nats / (d as f64 * LN_2) + RESCALE_BITS
                })
                .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(JetError::numeric(None, "non-finite bits per dimension"));
        }
        Ok(out)
    }

    fn bpd(&self, x: &Tensor<F>, raw: bool) -> Result<f64> {
        let per = self.bpd_per_sample(x)?;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        Ok(if raw { mean - RESCALE_BITS } else { mean })
    }

    /// Draw `count` images: standard normal latents through the inverse,
    /// back to `[0, 256)`, clamped to `[0, 255]` and rounded.
    ///
    /// Sample `i` draws its latent from seed [`latent_seed`]`(seed, i)`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Samples<F>> {
        let g = self.config.geom;
        let (k, w) = (g.tokens(), g.token_width());
        let mut z = Vec::with_capacity(count * k * w);
        for i in 0..count {
            let mut r = JetRng::seed_from_u64(latent_seed(seed, i));
            z.extend(rng::normal_tensor::<F>(&mut r, &[k, w], 1.0).into_data());
        }
        let latents = Tensor::new(&[count, k, w], z)?;
        if count == 0 {
            return Ok(Samples {
                images: Vec::new(),
                flow_space: latents.clone(),
                latents,
            });
        }
        let flow_space = self.flow_inverse(&latents)?;
        let images = unpatchify(&flow_space, &g)?
            .data()
            .iter()
            .map(|&v| ((v.as_f64() + 0.5) * 256.0).clamp(0.0, 255.0).round() as u8)
            .collect();
        Ok(Samples {
            images,
            latents,
            flow_space,
        })
    }
}

/// Seed of the latent for sample `index` of a draw seeded with `seed`.
pub fn latent_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[rng::stream::SAMPLE, index as u64])
}
