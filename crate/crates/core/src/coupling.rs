//! Affine coupling layers.
//!
//! A layer splits its input into `(x1, x2)`, leaves `x1` alone and maps
//!
//! ```text
//! y2 = (x2 + b(x1)) * sigmoid(s(x1)) * m
//! ```
//!
//! where `s` and `b` are the first and second halves of a backbone's output
//! width and `m = 2`. Every scale lies in `(0, m)`, and the log-determinant is
//! the sum of `log sigmoid(s) + ln m` over the transformed dimensions. At
//! initialization the backbone outputs zero, so each scale is exactly one.

use serde::{Deserialize, Serialize};

use crate::error::{JetError, Result};
use crate::numerics::{log_sigmoid, sigmoid, Float, ParamStore, Tape, Tensor, Var};
use crate::splitting::{self, SplitAxis, SplitKind, SplitMatrices, SplitPlan};
use crate::vit::{init_vit, ViTParams, ViTTemplate};

/// Upper bound of every coupling scale.
pub const SCALE_CAP: f64 = 2.0;

/// How a spatial coupling shows the untouched half to its backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// All K tokens go in, with the B positions zeroed.
    Masking,
    /// Only the K/2 A tokens go in; output row `i` drives B token `i`.
    #[default]
    Pairing,
}

/// Deliberate defects for exercising the verification suite.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Leave the `ln m` term out of the log-determinant.
    SkipLogM,
}

#[derive(Clone, Debug)]
pub struct CouplingLayer<F> {
    index: usize,
    plan: SplitPlan,
    mats: SplitMatrices<F>,
    vit: ViTParams,
    mode: CouplingMode,
    m: f64,
    fault: Option<Fault>,
}

impl<F: Float> CouplingLayer<F> {
    /// Build a layer for inputs `[B, K, 2d]`, registering its backbone in
    /// `store` under `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        plan: SplitPlan,
        template: &ViTTemplate,
        mode: CouplingMode,
        tokens: usize,
        token_width: usize,
        seed: u64,
        store: &mut ParamStore<F>,
        prefix: &str,
    ) -> Result<Self> {
        let cfg = match plan.axis() {
            SplitAxis::Channel => {
                if plan.extent() != token_width {
                    return Err(JetError::config(format!(
                        "channel plan over {} channels for tokens of width {token_width}",
                        plan.extent()
                    )));
                }
                template.instantiate(tokens, token_width / 2, token_width)
            }
            SplitAxis::Token => {
                if plan.extent() != tokens {
                    return Err(JetError::config(format!(
                        "spatial plan over {} tokens for a sequence of {tokens}",
                        plan.extent()
                    )));
                }
                let t = match mode {
                    CouplingMode::Pairing => tokens / 2,
                    CouplingMode::Masking => tokens,
                };
                template.instantiate(t, token_width, 2 * token_width)
            }
        };
        let vit = init_vit(cfg, seed, store, prefix)?;
        Ok(CouplingLayer {
            index,
            mats: plan.matrices(),
            plan,
            vit,
            mode,
            m: SCALE_CAP,
            fault: None,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kind(&self) -> SplitKind {
        self.plan.kind()
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    pub fn vit(&self) -> &ViTParams {
        &self.vit
    }

    /// Mode actually in effect; channel layers always behave the same.
    pub fn mode(&self) -> CouplingMode {
        self.mode
    }

    pub fn scale_cap(&self) -> f64 {
        self.m
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Raw scale and bias fields for the B half, each shaped like `x2`.
    pub fn scale_bias<'t>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x1: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let out = match (self.plan.axis(), self.mode) {
            (SplitAxis::Channel, _) | (SplitAxis::Token, CouplingMode::Pairing) => {
                self.vit.forward(tape, store, x1)?
            }
            (SplitAxis::Token, CouplingMode::Masking) => {
                let full = self.mats.scatter_a_var(x1)?;
                let out = self.vit.forward(tape, store, full)?;
                self.mats.gather_b_var(out)?
            }
        };
        let half = out.value().last_dim() / 2;
        Ok((out.slice_last(0, half)?, out.slice_last(half, half)?))
    }

    /// Forward on the tape. Returns `y` and the per-sample log-determinant `[B]`.
    pub fn forward_var<'t>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        self.check_input(&x.shape())?;
        let (x1, x2) = self.mats.split_var(x)?;
        let (s, b) = self.scale_bias(tape, store, x1)?;
        let y2 = x2.add(b)?.mul(s.sigmoid())?.scale(F::of(self.m));
        let mut per_dim = s.log_sigmoid();
        if self.fault != Some(Fault::SkipLogM) {
            per_dim = per_dim.add_const(F::of(self.m.ln()));
        }
        let y = self.mats.merge_var(x1, y2)?;
        Ok((y, per_dim.sum_per_batch()?))
    }

    /// Forward on plain tensors, `[B, K, 2d]` or `[K, 2d]`.
    pub fn forward(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>)> {
        let (batched, unbatch) = batch_view(x)?;
        let tape = Tape::new();
        let (y, logdet) = self.forward_var(&tape, store, tape.constant(batched))?;
        tape.check_finite().map_err(|e| e.in_layer(self.index))?;
        let y = (*y.value()).clone();
        let y = if unbatch { y.index_axis0(0) } else { y };
        Ok((y, logdet.value().data().to_vec()))
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, store: &ParamStore<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
        let (batched, unbatch) = batch_view(y)?;
        self.check_input(batched.shape())?;
        let (y1, y2) = splitting::split(&batched, &self.plan)?;
        let tape = Tape::new();
        let (s, b) = self.scale_bias(&tape, store, tape.constant(y1.clone()))?;
        tape.check_finite().map_err(|e| e.in_layer(self.index))?;
        let m = F::of(self.m);
        let scale = sigmoid(&s.value()).map(|v| v * m);
        let x2 = y2
            .zip_map(&scale, |a, c| a / c)?
            .zip_map(&b.value(), |a, c| a - c)?;
        if !x2.all_finite() {
            return Err(JetError::numeric(
                Some(self.index),
                "non-finite value in coupling inverse",
            ));
        }
        let x = splitting::merge(&y1, &x2, &self.plan)?;
        Ok(if unbatch { x.index_axis0(0) } else { x })
    }

    /// Per-element log scales `log sigmoid(s) + ln m` for the B half of `x`.
    pub fn log_scales(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (batched, _) = batch_view(x)?;
        self.check_input(batched.shape())?;
        let (x1, _) = splitting::split(&batched, &self.plan)?;
        let tape = Tape::new();
        let (s, _) = self.scale_bias(&tape, store, tape.constant(x1))?;
        let ln_m = F::of(self.m.ln());
        Ok(log_sigmoid(&s.value()).map(|v| v + ln_m))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = self.vit.config();
        let (k, w) = match self.plan.axis() {
            SplitAxis::Channel => (cfg.tokens, cfg.in_width * 2),
            SplitAxis::Token => (self.plan.extent(), cfg.in_width),
        };
        if shape.len() != 3 || shape[1] != k || shape[2] != w {
            return Err(JetError::shape(
                "coupling",
                format!("expected [B, {k}, {w}], got {shape:?}"),
            ));
        }
        Ok(())
    }
}

/// Lift `[K, W]` to `[1, K, W]`; the flag says whether to drop it again.
pub(crate) fn batch_view<F: Float>(x: &Tensor<F>) -> Result<(Tensor<F>, bool)> {
    match x.rank() {
        2 => {
            let s = x.shape();
            Ok((x.clone().reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((x.clone(), false)),
        _ => Err(JetError::shape(
            "coupling",
            format!("expected [B, K, 2d] or [K, 2d], got {:?}", x.shape()),
        )),
    }
}
