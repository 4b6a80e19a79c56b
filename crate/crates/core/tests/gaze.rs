use fsdt_core::gaze::{
    parse_trace, synth_trace, temporal_split, tile_quality_map, write_trace, GazeFrame, GazePoint, GazeTrace,
    TileQuality, TileRadii, GRID,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..=1.0f64, Just(0.0), Just(1.0), Just(0.25), Just(0.5)]
}

fn radii() -> impl Strategy<Value = TileRadii> {
    (0.0..3.0f64, 1e-3..3.0f64).prop_map(|(h, extra)| TileRadii::new(h, h + extra))
}

/// Quality of tile (i, j) from the distance, in the unit square, between the
/// gaze and the tile's own rectangle centre.
fn oracle(gaze: GazePoint, radii: TileRadii, i: usize, j: usize) -> TileQuality {
    let w = 1.0 / GRID as f64;
    let (cx, cy) = ((i as f64 + 0.5) * w, (j as f64 + 0.5) * w);
    let d = ((gaze.x - cx).abs() / w).max((gaze.y - cy).abs() / w);
    if d <= radii.high + 1e-12 {
        TileQuality::High
    } else if d <= radii.med + 1e-12 {
        TileQuality::Med
    } else {
        TileQuality::Low
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn map_partitions_the_grid(x in unit(), y in unit(), r in radii()) {
        let m = tile_quality_map(GazePoint::new(x, y), r).unwrap();
        let c = m.counts;
        prop_assert_eq!(c.high + c.med + c.low, 16);
        let high = m.grid.iter().flatten().filter(|&&q| q == TileQuality::High).count() as u32;
        let med = m.grid.iter().flatten().filter(|&&q| q == TileQuality::Med).count() as u32;
        prop_assert_eq!((high, med), (c.high, c.med));
    }

    #[test]
    fn map_matches_the_geometric_oracle(x in unit(), y in unit(), r in radii()) {
        let g = GazePoint::new(x, y);
        let m = tile_quality_map(g, r).unwrap();
        for i in 0..GRID {
            for j in 0..GRID {
                let want = oracle(g, r, i, j);
                // Ties within rounding of a radius may land on either side.
                let near_edge = {
                    let w = 0.25;
                    let d = ((x - (i as f64 + 0.5) * w).abs() / w).max((y - (j as f64 + 0.5) * w).abs() / w);
                    (d - r.high).abs() < 1e-9 || (d - r.med).abs() < 1e-9
                };
                if !near_edge {
                    prop_assert_eq!(m.grid[i][j], want, "tile ({}, {})", i, j);
                }
            }
        }
    }

    #[test]
    fn wider_radii_never_lose_quality(x in unit(), y in unit(), r in radii(), grow in 0.0..1.0f64) {
        let g = GazePoint::new(x, y);
        let small = tile_quality_map(g, r).unwrap().counts;
        let big = tile_quality_map(g, TileRadii::new(r.high + grow, r.med + grow)).unwrap().counts;
        prop_assert!(big.high >= small.high);
        prop_assert!(big.high + big.med >= small.high + small.med);
        prop_assert!(big.low <= small.low);
    }

    #[test]
    fn written_traces_parse_back(seed in any::<u64>(), n in 1usize..60, smooth in 0.0..=1.0f64) {
        let trace = synth_trace("v", n, &mut ChaCha8Rng::seed_from_u64(seed), smooth).unwrap();
        let back = parse_trace("v", &write_trace(&trace)).unwrap();
        prop_assert_eq!(back, trace);
    }

    #[test]
    fn split_keeps_every_frame_in_order(n in 1usize..500, ratio in 0.0..=1.0f64) {
        let frames = (0..n as u64).map(|t| GazeFrame { t, x: 0.5, y: 0.5 }).collect();
        let trace = GazeTrace::new("v", frames).unwrap();
        let (train, test) = temporal_split(&trace, ratio).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(train.len() as f64 >= ratio * n as f64 - 1e-6);
        prop_assert!((train.len() as f64) < ratio * n as f64 + 1.0);
        let joined: Vec<_> = train.frames.iter().chain(&test.frames).copied().collect();
        prop_assert_eq!(joined, trace.frames);
    }
}

#[test]
fn synthetic_walk_respects_its_step_bound() {
    for smooth in [0.0, 0.01, 0.05, 0.3] {
        let trace = synth_trace("walk", 10_000, &mut ChaCha8Rng::seed_from_u64(9), smooth).unwrap();
        trace.validate().unwrap();
        for w in trace.frames.windows(2) {
            assert!((w[1].x - w[0].x).abs() <= smooth + 1e-12);
            assert!((w[1].y - w[0].y).abs() <= smooth + 1e-12);
        }
    }
}

#[test]
fn tile_under_the_gaze_is_high_quality() {
    for i in 0..GRID {
        for j in 0..GRID {
            let g = GazePoint::new((i as f64 + 0.5) / 4.0, (j as f64 + 0.5) / 4.0);
            let m = tile_quality_map(g, TileRadii::new(0.0, 0.5)).unwrap();
            assert_eq!(m.grid[i][j], TileQuality::High);
            assert_eq!(m.counts.high, 1);
            assert_eq!(m.counts.med, 0);
        }
    }
}

#[test]
fn malformed_input_is_rejected() {
    assert!(tile_quality_map(GazePoint::new(1.01, 0.5), TileRadii::default()).is_err());
    assert!(tile_quality_map(GazePoint::new(0.5, f64::NAN), TileRadii::default()).is_err());
    assert!(tile_quality_map(GazePoint::center(), TileRadii::new(1.0, 1.0)).is_err());
    for bad in ["0,0.5", "0,0.5,1.5", "1,0.5,0.5\n1,0.5,0.5", "x,0.1,0.1"] {
        assert!(parse_trace("v", bad).is_err(), "{bad:?}");
    }
    assert!(parse_trace("v", "").unwrap().is_empty());
    assert!(synth_trace("v", 0, &mut ChaCha8Rng::seed_from_u64(0), 0.1).is_err());
}
