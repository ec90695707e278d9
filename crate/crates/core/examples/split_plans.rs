//! Print the four split patterns on a 4x4 patch grid and check that
//! splitting then merging is exact at 32 bits.

use jet::numerics::Tensor;
use jet::rng::{normal_tensor, rng_for};
use jet::splitting::{build_channel_plan, build_spatial_plan, merge, split, SplitKind};

fn main() -> jet::error::Result<()> {
    for kind in [
        SplitKind::RowWise,
        SplitKind::ColWise,
        SplitKind::Checkerboard,
    ] {
        let plan = build_spatial_plan(4, 4, kind)?;
        println!("{kind:?} (A = a, B = b, digits pair A with B):");
        let mut grid = vec![String::new(); 16];
        for (i, (a, b)) in plan.pairing().expect("spatial").into_iter().enumerate() {
            grid[a] = format!("a{i:x}");
            grid[b] = format!("b{i:x}");
        }
        for row in grid.chunks(4) {
            println!("  {}", row.join(" "));
        }
    }
    let plan = build_channel_plan(12, 3)?;
    println!(
        "channel plan, seed 3: A = {:?}, B = {:?}",
        plan.group_a(),
        plan.group_b()
    );

    let x: Tensor<f32> = normal_tensor(&mut rng_for(0, &[]), &[2, 16, 12], 10.0);
    let (a, b) = split(&x, &plan)?;
    println!("channel split/merge exact: {}", merge(&a, &b, &plan)? == x);
    Ok(())
}
