//! Expected deviation bound and worst-case grid spacing for the default
//! sample grids.
//!
//! cargo run --example deviation_bound -- [samples...]

use mpmi::envs::EnvId;
use mpmi::harness::RunConfig;
use mpmi::sampling::{deviation_bound, grid_half_spacing};

fn main() -> mpmi::Result<()> {
    for env in [EnvId::BalanceBot, EnvId::RaceCar] {
        let config = RunConfig::new(env);
        let samples = config.samples()?;
        let space = samples.space();
        let h = grid_half_spacing(&samples);
        println!("{env}: grid {:?} = {} samples", samples.counts(), samples.len());
        println!("  measure {:.3}, sum of widths {:.3}", space.measure(), space.total_width());
        println!("  bound {:.4e}", deviation_bound(space.measure(), samples.len()));
        println!("  half-spacing per dim {:?}, worst case {:.4e}", h.per_dim, h.worst_case);
    }
    let extra: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    for n in extra {
        println!("N = {n}: bound {:.4e} (measure 2)", deviation_bound(2.0, n));
    }
    Ok(())
}
