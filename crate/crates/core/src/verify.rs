//! Built-in invariant checks, runnable from the command line.
//!
//! Each check reports the largest error it observed next to its tolerance.
//! The fast level runs in well under a minute; the full level adds a
//! 200-step overfit run.

use std::f64::consts::LN_2;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingMode, Fault};
use crate::data_io::{self, synth_dataset, Checkpoint, SynthKind};
use crate::error::Result;
use crate::flow::{build_jet, schedule, ChannelRatio, JetConfig, JetModel, SpatialPolicy};
use crate::numerics::{Float, ParamId, Tape, Tensor};
use crate::patchify::PatchGeometry;
use crate::rng::{normal_tensor, rng_for};
use crate::splitting::{self, build_channel_plan, build_spatial_plan, SplitKind};
use crate::training::{self, state_checkpoint, train, TrainConfig, TrainOutputs};
use crate::vit::ViTTemplate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Fast,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} observed={:e} tolerance={:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn upper(
        &mut self,
        suite: &'static str,
        name: impl Into<String>,
        observed: f64,
        tolerance: f64,
    ) {
        let passed = observed <= tolerance;
        self.checks.push(CheckResult {
            suite,
            name: name.into(),
            observed,
            tolerance,
            passed,
        });
    }

    fn flag(&mut self, suite: &'static str, name: impl Into<String>, ok: bool) {
        let observed = if ok { 0.0 } else { 1.0 };
        self.checks.push(CheckResult {
            suite,
            name: name.into(),
            observed,
            tolerance: 0.0,
            passed: ok,
        });
    }

    fn fail(&mut self, suite: &'static str, name: impl Into<String>, err: impl fmt::Display) {
        let name = format!("{} ({err})", name.into());
        self.checks.push(CheckResult {
            suite,
            name,
            observed: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// `log |det A|` of a dense square matrix by LU with partial pivoting.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[pivot * n + col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
        }
        let p = m[col * n + col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of `f` at `x`, row-major `[out, in]`.
pub fn fd_jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = x.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut p = x.to_vec();
            p[j] += h;
            let fp = f(&p);
            p[j] = x[j] - h;
            let fm = f(&p);
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect()
        })
        .collect();
    let m = cols[0].len();
    let mut jac = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..m {
            jac[i * n + j] = col[i];
        }
    }
    jac
}

fn tiny_config(
    n: usize,
    ratio: ChannelRatio,
    policy: SpatialPolicy,
    mode: CouplingMode,
    geom: PatchGeometry,
) -> JetConfig {
    JetConfig {
        num_couplings: n,
        channel_ratio: ratio,
        spatial_policy: policy,
        vit: ViTTemplate::new(1, 16, 2),
        geom,
        mode,
        seed: 17,
    }
}

fn random_tokens<F: Float>(shape: &[usize], seed: u64, std: f64) -> Tensor<F> {
    normal_tensor(&mut rng_for(seed, &[]), shape, std)
}

fn round_trip<F: Float>(report: &mut Report, mode: CouplingMode, tol: f64) -> Result<()> {
    let geom = PatchGeometry::new(4, 4, 2, 1)?;
    let cfg = tiny_config(
        8,
        ChannelRatio::Ratio(1),
        SpatialPolicy::AlternateAll,
        mode,
        geom,
    );
    let mut model: JetModel<F> = build_jet(&cfg)?;
    model.randomize_heads(0.2, 5);
    let x: Tensor<F> = random_tokens(&[16, 16, 2], 1, 0.3);
    let back = model.flow_inverse(&model.flow_forward(&x)?.z)?;
    let e1 = back.max_abs_diff(&x).as_f64();
    let fwd = model.flow_forward(&model.flow_inverse(&x)?)?.z;
    let e2 = fwd.max_abs_diff(&x).as_f64();
    report.upper(
        "round_trip",
        format!("{}/{mode:?}", F::DTYPE),
        e1.max(e2),
        tol,
    );
    Ok(())
}

fn jacobian(report: &mut Report, fault: Option<Fault>) -> Result<()> {
    let geom = PatchGeometry::new(2, 2, 2, 1)?;
    for (ratio, policy) in [
        (ChannelRatio::Ratio(1), SpatialPolicy::CheckerOnly),
        (ChannelRatio::AllChannel, SpatialPolicy::RowOnly),
    ] {
        let cfg = tiny_config(2, ratio, policy, CouplingMode::Pairing, geom);
        let mut model: JetModel<f64> = build_jet(&cfg)?;
        model.randomize_heads(0.3, 8);
        model.set_fault(fault);
        let mut worst: f64 = 0.0;
        for trial in 0..5 {
            let x: Tensor<f64> = random_tokens(&[4, 2], 100 + trial, 0.5);
            let analytic = model.flow_forward(&x)?.logdet[0];
            let jac = fd_jacobian(x.data(), 1e-5, |p| {
                let t = Tensor::new(&[4, 2], p.to_vec()).expect("shape");
                model.flow_forward(&t).expect("finite").z.into_data()
            });
            worst = worst.max((analytic - log_abs_det(&jac, 8)).abs());
        }
        report.upper(
            "logdet_jacobian",
            format!("{:?}", model.kinds()),
            worst,
            1e-3,
        );
    }
    Ok(())
}

fn gradient(report: &mut Report) -> Result<()> {
    let geom = PatchGeometry::new(2, 4, 2, 1)?;
    let cfg = tiny_config(
        2,
        ChannelRatio::Ratio(1),
        SpatialPolicy::ColOnly,
        CouplingMode::Pairing,
        geom,
    );
    let mut model: JetModel<f64> = build_jet(&cfg)?;
    model.randomize_heads(0.1, 3);
    let x: Tensor<f64> = random_tokens(&[2, 8, 2], 4, 0.3);
    let loss_at = |m: &JetModel<f64>| -> f64 {
        let tape = Tape::new();
        m.nll_nats_var(&tape, tape.constant(x.clone()))
            .expect("loss")
            .value()
            .item()
    };
    let tape = Tape::new();
    let loss = model.nll_nats_var(&tape, tape.constant(x.clone()))?;
    model.params_mut().zero_grads();
    tape.backward(loss, model.params_mut())?;
    drop(tape);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    // Every 7th scalar keeps the fast level quick while touching every tensor.
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            if j % 7 != pi % 7 && grads.len() > 7 {
                continue;
            }
            let id = ParamId(pi);
            let orig = model.params().value(id).data()[j];
            model.params_mut().get_mut(id).value.data_mut()[j] = orig + h;
            let lp = loss_at(&model);
            model.params_mut().get_mut(id).value.data_mut()[j] = orig - h;
            let lm = loss_at(&model);
            model.params_mut().get_mut(id).value.data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    report.upper("gradient", "nll_nats", worst, 1e-3);
    Ok(())
}

fn identity(report: &mut Report) -> Result<()> {
    let mut all_exact = true;
    let mut count = 0;
    for mode in [CouplingMode::Pairing, CouplingMode::Masking] {
        for (ratio, policy) in [
            (ChannelRatio::Ratio(1), SpatialPolicy::AlternateAll),
            (ChannelRatio::Ratio(0), SpatialPolicy::CheckerOnly),
            (ChannelRatio::AllChannel, SpatialPolicy::RowOnly),
            (ChannelRatio::Ratio(2), SpatialPolicy::ColOnly),
        ] {
            let cfg = tiny_config(4, ratio, policy, mode, PatchGeometry::new(4, 4, 3, 2)?);
            let m32: JetModel<f32> = build_jet(&cfg)?;
            let x32: Tensor<f32> = random_tokens(&[3, 4, 12], 2, 0.3);
            let r = m32.flow_forward(&x32)?;
            all_exact &= r.z == x32 && r.logdet.iter().all(|&v| v == 0.0);
            let m64: JetModel<f64> = build_jet(&cfg)?;
            let x64: Tensor<f64> = random_tokens(&[3, 4, 12], 2, 0.3);
            let r = m64.flow_forward(&x64)?;
            all_exact &= r.z == x64 && r.logdet.iter().all(|&v| v == 0.0);
            count += 1;
        }
    }
    report.flag("identity_init", format!("{count} configs exact"), all_exact);

    // Samples from an identity model are clamped, rescaled unit normals.
    let cfg = tiny_config(
        2,
        ChannelRatio::Ratio(1),
        SpatialPolicy::RowOnly,
        CouplingMode::Pairing,
        PatchGeometry::new(4, 4, 3, 2)?,
    );
    let m: JetModel<f64> = build_jet(&cfg)?;
    let s = m.sample(400, 3)?;
    let n = s.images.len() as f64;
    let mean = s.images.iter().map(|&p| p as f64).sum::<f64>() / n;
    report.upper(
        "identity_init",
        "sample_mean_vs_127.5",
        (mean - 127.5).abs(),
        2.0,
    );
    // A pixel rounds to 0 when 256 (z + 0.5) < 0.5, i.e. z < -127.5 / 256.
    let zeros = s.images.iter().filter(|&&p| p == 0).count() as f64 / n;
    let expected = 0.5 * libm::erfc(127.5 / 256.0 / std::f64::consts::SQRT_2);
    report.upper(
        "identity_init",
        "sample_clamp_fraction",
        (zeros - expected).abs(),
        0.01,
    );
    Ok(())
}

/// Independent statement of the layer schedule: whole groups of `M`
/// channels plus one spatial, then a channels-only remainder.
fn reference_schedule(n: usize, ratio: ChannelRatio, policy: SpatialPolicy) -> Vec<SplitKind> {
    let ChannelRatio::Ratio(m) = ratio else {
        return vec![SplitKind::Channel; n];
    };
    let cycle: Vec<SplitKind> = match policy {
        SpatialPolicy::RowOnly => vec![SplitKind::RowWise],
        SpatialPolicy::ColOnly => vec![SplitKind::ColWise],
        SpatialPolicy::CheckerOnly => vec![SplitKind::Checkerboard],
        SpatialPolicy::AlternateAll => vec![
            SplitKind::RowWise,
            SplitKind::ColWise,
            SplitKind::Checkerboard,
        ],
    };
    let mut out = Vec::new();
    let mut g = 0;
    while out.len() < n {
        out.extend(std::iter::repeat_n(SplitKind::Channel, m));
        out.push(cycle[g % cycle.len()]);
        g += 1;
    }
    out.truncate(n);
    out
}

fn schedules(report: &mut Report) {
    let policies = [
        SpatialPolicy::RowOnly,
        SpatialPolicy::ColOnly,
        SpatialPolicy::CheckerOnly,
        SpatialPolicy::AlternateAll,
    ];
    let mut mismatches = 0;
    let mut cases = 0;
    for n in 1..=9 {
        for ratio in [
            ChannelRatio::Ratio(0),
            ChannelRatio::Ratio(1),
            ChannelRatio::Ratio(2),
            ChannelRatio::Ratio(3),
            ChannelRatio::AllChannel,
        ] {
            for policy in policies {
                cases += 1;
                if schedule(n, ratio, policy) != reference_schedule(n, ratio, policy) {
                    mismatches += 1;
                }
            }
        }
    }
    report.upper("schedule", format!("{cases} cases"), mismatches as f64, 0.0);
}

fn formats(report: &mut Report) -> Result<()> {
    let cfg = tiny_config(
        3,
        ChannelRatio::Ratio(1),
        SpatialPolicy::AlternateAll,
        CouplingMode::Pairing,
        PatchGeometry::new(4, 4, 3, 2)?,
    );
    let mut model: JetModel<f32> = build_jet(&cfg)?;
    model.randomize_heads(0.1, 1);
    let ck = state_checkpoint(&model, &TrainConfig::default(), None, 7, "")?;
    let bytes = data_io::write_checkpoint(&ck)?;
    let back: Checkpoint = data_io::read_checkpoint(&bytes, Path::new("<memory>"))?;
    let again = data_io::write_checkpoint(&back)?;
    let restored = training::restore_state::<f32>(&back, Path::new("<memory>"))?;
    let same = restored
        .model
        .params()
        .iter()
        .zip(model.params().iter())
        .all(|(a, b)| a.value == b.value);
    report.flag(
        "format",
        "checkpoint_bitwise",
        back == ck && again == bytes && same,
    );

    let mut rec = vec![0u8];
    rec.extend((0..3072).map(|i| (i % 251) as u8));
    let img = data_io::parse_cifar_batch(&rec.repeat(3), Path::new("<memory>"))?;
    let layout_ok = img.len() == 3 * 3072
        && img[0] == 0
        && img[1] == (1024 % 251) as u8
        && img[2] == (2048 % 251) as u8;
    report.flag("format", "cifar_record_layout", layout_ok);

    let mut ok = true;
    let x: Tensor<f32> = random_tokens(&[2, 16, 6], 9, 1.0);
    for plan in [
        build_channel_plan(6, 4)?,
        build_spatial_plan(4, 4, SplitKind::RowWise)?,
        build_spatial_plan(4, 4, SplitKind::ColWise)?,
        build_spatial_plan(4, 4, SplitKind::Checkerboard)?,
    ] {
        let (a, b) = splitting::split(&x, &plan)?;
        ok &= splitting::merge(&a, &b, &plan)? == x;
        ok &= (a, b) == splitting::split_by_gather(&x, &plan)?;
    }
    report.flag("format", "split_merge_bitwise_f32", ok);
    Ok(())
}

fn overfit(report: &mut Report) -> Result<()> {
    let geom = PatchGeometry::new(8, 8, 3, 2)?;
    let cfg = JetConfig {
        num_couplings: 2,
        channel_ratio: ChannelRatio::Ratio(1),
        spatial_policy: SpatialPolicy::CheckerOnly,
        vit: ViTTemplate::new(1, 32, 4),
        geom,
        mode: CouplingMode::Pairing,
        seed: 1,
    };
    let data = synth_dataset(SynthKind::GaussianBlobs, 64, (8, 8, 3), 11)?;
    let tc = TrainConfig {
        steps: Some(200),
        batch_size: 64,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let mut model: JetModel<f32> = build_jet(&cfg)?;
    let run = train(&mut model, &data, &tc, None, &TrainOutputs::default())?;
    let first = run.metrics[0].train_bpd;
    let last = run.metrics.last().expect("steps").train_bpd;
    report.upper(
        "overfit",
        format!("drop from {first:.4} to {last:.4}"),
        0.5 - (first - last),
        0.0,
    );
    Ok(())
}

/// Run every suite at `level`. With `fault`, the coupling layers are
/// deliberately broken first so the suites can prove they notice.
pub fn run(level: Level, fault: Option<Fault>) -> Report {
    let mut r = Report::default();
    let guard = |suite: &'static str, rep: &mut Report, res: Result<()>| {
        if let Err(e) = res {
            rep.fail(suite, "error", e);
        }
    };
    let res = round_trip::<f64>(&mut r, CouplingMode::Pairing, 1e-10);
    guard("round_trip", &mut r, res);
    let res = round_trip::<f64>(&mut r, CouplingMode::Masking, 1e-10);
    guard("round_trip", &mut r, res);
    let res = round_trip::<f32>(&mut r, CouplingMode::Pairing, 1e-4);
    guard("round_trip", &mut r, res);
    let res = round_trip::<f32>(&mut r, CouplingMode::Masking, 1e-4);
    guard("round_trip", &mut r, res);
    let res = jacobian(&mut r, fault);
    guard("logdet_jacobian", &mut r, res);
    let res = gradient(&mut r);
    guard("gradient", &mut r, res);
    let res = identity(&mut r);
    guard("identity_init", &mut r, res);
    schedules(&mut r);
    let res = formats(&mut r);
    guard("format", &mut r, res);
    if level == Level::Full {
        let res = overfit(&mut r);
        guard("overfit", &mut r, res);
    }
    r
}

/// Expected logdet error from leaving out `ln m` in one layer of `half_dims`
/// transformed dimensions.
pub fn skipped_log_m_error(half_dims: usize) -> f64 {
    half_dims as f64 * LN_2
}
