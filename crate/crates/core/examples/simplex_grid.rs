//! Enumerate the measures `P^m([d])`, rank them and move one player.

use finite_mfg::simplex::{grid_cardinality, shift};
use finite_mfg::SimplexGrid;

fn main() -> finite_mfg::Result<()> {
    let (d, m) = (3, 4);
    let grid = SimplexGrid::enumerate(d, m)?;
    println!("|P^{m}([{d}])| = {} (closed form {:?})", grid.len(), grid_cardinality(d, m));
    for r in 0..grid.len() {
        println!("{r:>3}  counts {:?}  eta {:?}", grid.counts(r), grid.point(r));
    }

    let eta = [0.5, 0.25, 0.25];
    let r = grid.rank(&eta)?;
    println!("rank of {eta:?} is {r}, unrank gives {:?}", grid.unrank(r)?.weights());
    let moved = shift(&eta, 0, 2, m)?;
    println!("one player 0 -> 2: {:?} (rank {:?})", moved.weights(), grid.shift_rank(r, 0, 2));
    Ok(())
}
