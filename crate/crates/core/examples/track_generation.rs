//! Generates a seeded race track and prints its geometry. With `--csv`
//! the centerline is printed as `x,y` rows.
//!
//! cargo run --example track_generation -- 7 --csv

use mpmi::envs::{generate_track, TrackParams};

fn main() -> mpmi::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.iter().find_map(|a| a.parse().ok()).unwrap_or(7);
    let params = TrackParams::default();
    let track = generate_track(seed, &params)?;
    if args.iter().any(|a| a == "--csv") {
        println!("x,y");
        for [x, y] in track.centerline() {
            println!("{x},{y}");
        }
        return Ok(());
    }
    let (lo, hi) = track.curvature_range();
    let ([x0, y0], heading) = track.start_pose();
    println!("seed {seed}: {} waypoints, closed {}", track.centerline().len(), track.is_closed());
    println!("half-width {} m, curvature {lo:.4e} .. {hi:.4} 1/m", track.half_width());
    println!("start ({x0:.2}, {y0:.2}) heading {heading:.3} rad");
    for p in [[0.0, 0.0], [x0 + 1.0, y0], [x0, y0 + 5.0]] {
        println!("distance from {p:?} to the centerline: {:.3} m", track.distance_to_centerline(p));
    }
    Ok(())
}
