//! Invertible dimension partitions, applied as products with frozen 0/1
//! matrices.
//!
//! A [`SplitPlan`] partitions either the channel axis of every token or the
//! token axis into two halves A and B. Group B is stored in pairing order:
//! `group_b[i]` is the partner of `group_a[i]`, so once a backbone has
//! produced one output row per A token, row `i` lines up with `x2` row `i`.
//!
//! Splitting and merging go through [`PrecisionMode::Full`] products. With
//! 0/1 operands every output is one input plus exact zeros, so merge undoes
//! split bit for bit.
//!
//! Spatial pairings:
//!
//! | kind         | group A          | partner of `(r, c)`   |
//! |--------------|------------------|-----------------------|
//! | RowWise      | even rows        | `(r + 1, c)`          |
//! | ColWise      | even columns     | `(r, c + 1)`          |
//! | Checkerboard | `r + c` even     | `(r, (c + 1) mod Wp)` |

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{JetError, Result};
use crate::numerics::{matmul, Float, PrecisionMode, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Channel,
    RowWise,
    ColWise,
    Checkerboard,
}

impl SplitKind {
    pub fn axis(self) -> SplitAxis {
        match self {
            SplitKind::Channel => SplitAxis::Channel,
            _ => SplitAxis::Token,
        }
    }

    pub fn is_spatial(self) -> bool {
        self.axis() == SplitAxis::Token
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitAxis {
    Channel,
    Token,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    kind: SplitKind,
    extent: usize,
    group_a: Vec<usize>,
    group_b: Vec<usize>,
    grid: Option<(usize, usize)>,
    seed: Option<u64>,
}

/// Seeded random channel partition: a permutation of `channels` whose first
/// half forms group A.
pub fn build_channel_plan(channels: usize, seed: u64) -> Result<SplitPlan> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(JetError::config(format!(
            "channel split needs an even width, got {channels}"
        )));
    }
    let mut perm: Vec<usize> = (0..channels).collect();
    perm.shuffle(&mut rng::rng_for(seed, &[rng::stream::CHANNEL_PLAN]));
    let mut plan = SplitPlan::channel_from_permutation(&perm)?;
    plan.seed = Some(seed);
    Ok(plan)
}

/// Token partition over an `Hp×Wp` patch grid.
pub fn build_spatial_plan(grid_h: usize, grid_w: usize, pattern: SplitKind) -> Result<SplitPlan> {
    if grid_h == 0 || grid_w == 0 || !grid_h.is_multiple_of(2) || !grid_w.is_multiple_of(2) {
        return Err(JetError::config(format!(
            "spatial split needs an even grid, got {grid_h}x{grid_w}"
        )));
    }
    let at = |r: usize, c: usize| r * grid_w + c;
    let mut group_a = Vec::new();
    let mut group_b = Vec::new();
    for r in 0..grid_h {
        for c in 0..grid_w {
            let partner = match pattern {
                SplitKind::RowWise if r % 2 == 0 => at(r + 1, c),
                SplitKind::ColWise if c % 2 == 0 => at(r, c + 1),
                SplitKind::Checkerboard if (r + c) % 2 == 0 => at(r, (c + 1) % grid_w),
                SplitKind::Channel => {
                    return Err(JetError::config("channel kind is not a spatial pattern"));
                }
                _ => continue,
            };
            group_a.push(at(r, c));
            group_b.push(partner);
        }
    }
    let plan = SplitPlan {
        kind: pattern,
        extent: grid_h * grid_w,
        group_a,
        group_b,
        grid: Some((grid_h, grid_w)),
        seed: None,
    };
    plan.check_partition()?;
    Ok(plan)
}

impl SplitPlan {
    /// Channel plan from an explicit permutation. The first half goes to A.
    pub fn channel_from_permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(JetError::config(format!(
                "channel split needs an even width, got {n}"
            )));
        }
        let plan = SplitPlan {
            kind: SplitKind::Channel,
            extent: n,
            group_a: perm[..n / 2].to_vec(),
            group_b: perm[n / 2..].to_vec(),
            grid: None,
            seed: None,
        };
        plan.check_partition()?;
        Ok(plan)
    }

    fn check_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.extent];
        for &i in self.group_a.iter().chain(&self.group_b) {
            if i >= self.extent || std::mem::replace(&mut seen[i], true) {
                return Err(JetError::config(format!(
                    "{:?} plan is not a partition",
                    self.kind
                )));
            }
        }
        if seen.iter().any(|s| !s) || self.group_a.len() != self.group_b.len() {
            return Err(JetError::config(format!(
                "{:?} plan is not a partition",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn axis(&self) -> SplitAxis {
        self.kind.axis()
    }

    /// Length of the partitioned axis.
    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn half(&self) -> usize {
        self.extent / 2
    }

    pub fn group_a(&self) -> &[usize] {
        &self.group_a
    }

    /// Group B in pairing order.
    pub fn group_b(&self) -> &[usize] {
        &self.group_b
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    /// Partner in group B (as an axis index) of the A element with axis index `a`.
    pub fn partner(&self, a: usize) -> Option<usize> {
        self.group_a
            .iter()
            .position(|&x| x == a)
            .map(|i| self.group_b[i])
    }

    /// Pairing map for spatial plans: A token index → B token index.
    pub fn pairing(&self) -> Option<Vec<(usize, usize)>> {
        self.kind.is_spatial().then(|| {
            self.group_a
                .iter()
                .copied()
                .zip(self.group_b.iter().copied())
                .collect()
        })
    }

    fn selector<F: Float>(&self, group: &[usize]) -> Tensor<F> {
        let mut t = Tensor::zeros(&[group.len(), self.extent]);
        for (row, &col) in group.iter().enumerate() {
            t.data_mut()[row * self.extent + col] = F::one();
        }
        t
    }

    pub fn matrices<F: Float>(&self) -> SplitMatrices<F> {
        let a: Tensor<F> = self.selector(&self.group_a);
        let b: Tensor<F> = self.selector(&self.group_b);
        SplitMatrices {
            axis: self.axis(),
            a_t: Arc::new(a.transpose().expect("rank 2")),
            b_t: Arc::new(b.transpose().expect("rank 2")),
            a: Arc::new(a),
            b: Arc::new(b),
        }
    }

    fn check_input(&self, shape: &[usize], op: &'static str) -> Result<()> {
        let n = shape.len();
        let ok = match self.axis() {
            SplitAxis::Channel => n >= 2 && shape[n - 1] == self.extent,
            SplitAxis::Token => n >= 2 && shape[n - 2] == self.extent,
        };
        if ok {
            Ok(())
        } else {
            Err(JetError::shape(
                op,
                format!(
                    "{shape:?} for {:?} plan of extent {}",
                    self.kind, self.extent
                ),
            ))
        }
    }
}

/// The frozen selection matrices of a plan, `[half, extent]`, and their transposes.
#[derive(Clone, Debug)]
pub struct SplitMatrices<F> {
    axis: SplitAxis,
    a: Arc<Tensor<F>>,
    b: Arc<Tensor<F>>,
    a_t: Arc<Tensor<F>>,
    b_t: Arc<Tensor<F>>,
}

impl<F: Float> SplitMatrices<F> {
    pub fn select_a(&self) -> &Tensor<F> {
        &self.a
    }

    pub fn select_b(&self) -> &Tensor<F> {
        &self.b
    }

    pub fn split_var<'t>(&self, x: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
        match self.axis {
            SplitAxis::Channel => Ok((
                x.matmul_const(Arc::clone(&self.a_t))?,
                x.matmul_const(Arc::clone(&self.b_t))?,
            )),
            SplitAxis::Token => Ok((
                x.left_matmul_const(Arc::clone(&self.a))?,
                x.left_matmul_const(Arc::clone(&self.b))?,
            )),
        }
    }

    pub fn merge_var<'t>(&self, y1: Var<'t, F>, y2: Var<'t, F>) -> Result<Var<'t, F>> {
        let (p, q) = match self.axis {
            SplitAxis::Channel => (
                y1.matmul_const(Arc::clone(&self.a))?,
                y2.matmul_const(Arc::clone(&self.b))?,
            ),
            SplitAxis::Token => (
                y1.left_matmul_const(Arc::clone(&self.a_t))?,
                y2.left_matmul_const(Arc::clone(&self.b_t))?,
            ),
        };
        p.add(q)
    }

    /// Place group-A rows back at their token positions with zeros elsewhere.
    pub fn scatter_a_var<'t>(&self, x1: Var<'t, F>) -> Result<Var<'t, F>> {
        match self.axis {
            SplitAxis::Channel => x1.matmul_const(Arc::clone(&self.a)),
            SplitAxis::Token => x1.left_matmul_const(Arc::clone(&self.a_t)),
        }
    }

    /// Pick the group-B rows, in pairing order.
    pub fn gather_b_var<'t>(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        match self.axis {
            SplitAxis::Channel => x.matmul_const(Arc::clone(&self.b_t)),
            SplitAxis::Token => x.left_matmul_const(Arc::clone(&self.b)),
        }
    }

    fn split_tensor(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        match self.axis {
            SplitAxis::Channel => Ok((
                matmul(x, &self.a_t, PrecisionMode::Full)?,
                matmul(x, &self.b_t, PrecisionMode::Full)?,
            )),
            SplitAxis::Token => Ok((
                crate::numerics::left_matmul(&self.a, x)?,
                crate::numerics::left_matmul(&self.b, x)?,
            )),
        }
    }

    fn merge_tensor(&self, y1: &Tensor<F>, y2: &Tensor<F>) -> Result<Tensor<F>> {
        let (p, q) = match self.axis {
            SplitAxis::Channel => (
                matmul(y1, &self.a, PrecisionMode::Full)?,
                matmul(y2, &self.b, PrecisionMode::Full)?,
            ),
            SplitAxis::Token => (
                crate::numerics::left_matmul(&self.a_t, y1)?,
                crate::numerics::left_matmul(&self.b_t, y2)?,
            ),
        };
        p.zip_map(&q, |a, b| a + b)
    }
}

/// Split `[.., K, 2d]` into its two halves with full-precision 0/1 products.
///
/// Channel plans give two `[.., K, d]` halves; spatial plans give two
/// `[.., K/2, 2d]` halves with B rows in pairing order.
pub fn split<F: Float>(x: &Tensor<F>, plan: &SplitPlan) -> Result<(Tensor<F>, Tensor<F>)> {
    plan.check_input(x.shape(), "split")?;
    plan.matrices().split_tensor(x)
}

/// Inverse of [`split`].
pub fn merge<F: Float>(y1: &Tensor<F>, y2: &Tensor<F>, plan: &SplitPlan) -> Result<Tensor<F>> {
    let n = y1.rank();
    if n < 2 || y1.shape() != y2.shape() {
        return Err(JetError::shape(
            "merge",
            format!("{:?} and {:?}", y1.shape(), y2.shape()),
        ));
    }
    let axis = match plan.axis() {
        SplitAxis::Channel => n - 1,
        SplitAxis::Token => n - 2,
    };
    if y1.shape()[axis] != plan.half() {
        return Err(JetError::shape(
            "merge",
            format!("{:?} for plan half {}", y1.shape(), plan.half()),
        ));
    }
    plan.matrices().merge_tensor(y1, y2)
}

/// Index-gather split, without any arithmetic. Reference for [`split`].
pub fn split_by_gather<F: Float>(
    x: &Tensor<F>,
    plan: &SplitPlan,
) -> Result<(Tensor<F>, Tensor<F>)> {
    plan.check_input(x.shape(), "split_by_gather")?;
    let shape = x.shape();
    let n = shape.len();
    let gather = |group: &[usize]| -> Result<Tensor<F>> {
        let mut out_shape = shape.to_vec();
        let mut data = Vec::with_capacity(x.numel() / 2);
        match plan.axis() {
            SplitAxis::Channel => {
                out_shape[n - 1] = group.len();
                for row in x.data().chunks(shape[n - 1]) {
                    data.extend(group.iter().map(|&c| row[c]));
                }
            }
            SplitAxis::Token => {
                out_shape[n - 2] = group.len();
                let w = shape[n - 1];
                for image in x.data().chunks(shape[n - 2] * w) {
                    for &t in group {
                        data.extend_from_slice(&image[t * w..(t + 1) * w]);
                    }
                }
            }
        }
        Tensor::new(&out_shape, data)
    };
    Ok((gather(&plan.group_a)?, gather(&plan.group_b)?))
}
