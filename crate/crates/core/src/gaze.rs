//! Gaze traces and the mapping from a gaze point to per-tile quality levels
//! on the 4×4 equirectangular tile grid.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::PerQuality;
use crate::error::{Error, Result};

pub const GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
}

impl GazePoint {
    pub fn new(x: f64, y: f64) -> Self {
        GazePoint { x, y }
    }

    pub fn center() -> Self {
        GazePoint { x: 0.5, y: 0.5 }
    }

    fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeFrame {
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

impl GazeFrame {
    pub fn point(&self) -> GazePoint {
        GazePoint { x: self.x, y: self.y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrace {
    pub video_id: String,
    pub frames: Vec<GazeFrame>,
}

impl GazeTrace {
    pub fn new(video_id: impl Into<String>, frames: Vec<GazeFrame>) -> Result<Self> {
        let trace = GazeTrace { video_id: video_id.into(), frames };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            if !f.point().in_unit_square() {
                return Err(Error::Domain(format!("frame {} gaze ({}, {}) outside [0,1]²", f.t, f.x, f.y)));
            }
            if i > 0 && f.t <= self.frames[i - 1].t {
                return Err(Error::Domain(format!("frame index {} not increasing", f.t)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TileQuality {
    High,
    Med,
    Low,
}

/// Chebyshev radii, in tile widths, of the high- and medium-quality regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileRadii {
    pub high: f64,
    pub med: f64,
}

impl Default for TileRadii {
    fn default() -> Self {
        TileRadii { high: 0.8, med: 1.8 }
    }
}

impl TileRadii {
    pub fn new(high: f64, med: f64) -> Self {
        TileRadii { high, med }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.high && self.high < self.med) {
            return Err(Error::Domain(format!("tile radii need 0 <= high < med, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileQualityMap {
    /// `grid[i][j]` is the tile at column `i` (x) and row `j` (y).
    pub grid: [[TileQuality; GRID]; GRID],
    pub counts: PerQuality<u32>,
}

pub fn tile_quality_map(gaze: GazePoint, radii: TileRadii) -> Result<TileQualityMap> {
    if !gaze.in_unit_square() {
        return Err(Error::Domain(format!("gaze ({}, {}) outside [0,1]²", gaze.x, gaze.y)));
    }
    radii.validate()?;
    let (gx, gy) = (gaze.x * GRID as f64, gaze.y * GRID as f64);
    let mut grid = [[TileQuality::Low; GRID]; GRID];
    let mut counts = PerQuality { high: 0, med: 0, low: 0 };
    for (i, column) in grid.iter_mut().enumerate() {
        for (j, tile) in column.iter_mut().enumerate() {
            let dx = (gx - (i as f64 + 0.5)).abs();
            let dy = (gy - (j as f64 + 0.5)).abs();
            let d = dx.max(dy);
            *tile = if d <= radii.high {
                counts.high += 1;
                TileQuality::High
            } else if d <= radii.med {
                counts.med += 1;
                TileQuality::Med
            } else {
                counts.low += 1;
                TileQuality::Low
            };
        }
    }
    Ok(TileQualityMap { grid, counts })
}

/// Bounded random walk with reflection at the borders of the unit square.
/// Each coordinate moves by at most `smoothness` per frame.
pub fn synth_trace(
    video_id: impl Into<String>,
    video_len: usize,
    rng: &mut impl Rng,
    smoothness: f64,
) -> Result<GazeTrace> {
    if video_len == 0 {
        return Err(Error::Domain("synthetic trace needs at least one frame".into()));
    }
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(Error::Domain(format!("smoothness {smoothness} outside [0, 1]")));
    }
    let mut x = rng.random_range(0.0..=1.0);
    let mut y = rng.random_range(0.0..=1.0);
    let mut frames = Vec::with_capacity(video_len);
    for t in 0..video_len {
        frames.push(GazeFrame { t: t as u64, x, y });
        if smoothness > 0.0 {
            x = reflect(x + rng.random_range(-smoothness..=smoothness));
            y = reflect(y + rng.random_range(-smoothness..=smoothness));
        }
    }
    Ok(GazeTrace { video_id: video_id.into(), frames })
}

fn reflect(v: f64) -> f64 {
    if v < 0.0 {
        -v
    } else if v > 1.0 {
        2.0 - v
    } else {
        v
    }
}

/// First `⌈ratio·n⌉` frames for training, the remainder for testing.
pub fn temporal_split(trace: &GazeTrace, ratio: f64) -> Result<(GazeTrace, GazeTrace)> {
    if trace.is_empty() {
        return Err(Error::Domain("cannot split an empty trace".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n = trace.len();
    // Rounding guard so that e.g. 0.8·100 is not pushed to 81 by float error.
    let cut = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let cut = cut.min(n);
    let train = GazeTrace { video_id: trace.video_id.clone(), frames: trace.frames[..cut].to_vec() };
    let test = GazeTrace { video_id: trace.video_id.clone(), frames: trace.frames[cut..].to_vec() };
    Ok((train, test))
}

/// Parses header-less `frame_index,x,y` rows.
pub fn parse_trace(video_id: impl Into<String>, text: &str) -> Result<GazeTrace> {
    let mut frames: Vec<GazeFrame> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line, msg };
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let t: u64 = fields[0].parse().map_err(|_| err(format!("bad frame index {:?}", fields[0])))?;
        let x: f64 = fields[1].parse().map_err(|_| err(format!("bad x {:?}", fields[1])))?;
        let y: f64 = fields[2].parse().map_err(|_| err(format!("bad y {:?}", fields[2])))?;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(err(format!("coordinate ({x}, {y}) out of range [0,1]")));
        }
        if let Some(prev) = frames.last() {
            if t <= prev.t {
                return Err(err(format!("frame index {t} does not follow {}", prev.t)));
            }
        }
        frames.push(GazeFrame { t, x, y });
    }
    Ok(GazeTrace { video_id: video_id.into(), frames })
}

pub fn write_trace(trace: &GazeTrace) -> String {
    let mut out = String::new();
    for f in &trace.frames {
        writeln!(out, "{},{},{}", f.t, f.x, f.y).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tile_center(i: usize, j: usize) -> GazePoint {
        GazePoint::new((i as f64 + 0.5) / 4.0, (j as f64 + 0.5) / 4.0)
    }

    fn counts(m: &TileQualityMap) -> (u32, u32, u32) {
        (m.counts.high, m.counts.med, m.counts.low)
    }

    #[test]
    fn centered_on_tile_one_one() {
        let m = tile_quality_map(tile_center(1, 1), TileRadii::new(0.6, 1.6)).unwrap();
        assert_eq!(counts(&m), (1, 8, 7));
        assert_eq!(m.grid[1][1], TileQuality::High);
        assert_eq!(m.grid[3][3], TileQuality::Low);
    }

    #[test]
    fn wide_medium_radius_leaves_no_low_tiles() {
        for &(x, y) in &[(0.0, 0.0), (0.3, 0.9), (1.0, 0.5)] {
            let m = tile_quality_map(GazePoint::new(x, y), TileRadii::new(0.5, 4.0)).unwrap();
            assert_eq!(m.counts.low, 0);
        }
    }

    #[test]
    fn three_nine_four_split_on_the_top_edge() {
        // Columns 0..=2 within 1 of x = 1.5 tiles, only row 0 within 1 of y = 0;
        // the medium ball then spans all 4 columns and rows 0..=2.
        let m = tile_quality_map(GazePoint::new(0.375, 0.0), TileRadii::new(1.0, 2.5)).unwrap();
        assert_eq!(counts(&m), (3, 9, 4));
        for i in 0..3 {
            assert_eq!(m.grid[i][0], TileQuality::High);
        }
        assert!(m.grid.iter().all(|col| col[3] == TileQuality::Low));
    }

    #[test]
    fn three_nine_four_found_by_search() {
        let steps = 40;
        let mut hits = 0;
        for hi in 0..=20 {
            for mi in hi + 1..=40 {
                let radii = TileRadii::new(hi as f64 * 0.1, mi as f64 * 0.1);
                for a in 0..=steps {
                    for b in 0..=steps {
                        let g = GazePoint::new(a as f64 / steps as f64, b as f64 / steps as f64);
                        if counts(&tile_quality_map(g, radii).unwrap()) == (3, 9, 4) {
                            hits += 1;
                        }
                    }
                }
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (x, y) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
            let r = TileRadii::new(rng.random_range(0.0..1.5), rng.random_range(1.5..3.0));
            let a = tile_quality_map(GazePoint::new(x, y), r).unwrap();
            let b = tile_quality_map(GazePoint::new(y, x), r).unwrap();
            assert_eq!(a.counts, b.counts);
            assert_eq!(a.counts.total(), 16);
            for i in 0..GRID {
                for j in 0..GRID {
                    assert_eq!(a.grid[i][j], b.grid[j][i]);
                }
            }
        }
    }

    #[test]
    fn synthetic_trace_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let still = synth_trace("v", 50, &mut rng, 0.0).unwrap();
        assert!(still.frames.iter().all(|f| f.x == still.frames[0].x && f.y == still.frames[0].y));

        let a = synth_trace("v", 300, &mut ChaCha8Rng::seed_from_u64(9), 0.05).unwrap();
        let b = synth_trace("v", 300, &mut ChaCha8Rng::seed_from_u64(9), 0.05).unwrap();
        assert_eq!(a, b);

        let s = 0.07;
        let long = synth_trace("v", 10_000, &mut rng, s).unwrap();
        long.validate().unwrap();
        let max_step =
            long.frames.windows(2).map(|w| (w[1].x - w[0].x).abs().max((w[1].y - w[0].y).abs())).fold(0.0, f64::max);
        assert!(max_step <= s + 1e-12, "{max_step}");
        assert!(max_step > 0.5 * s);
    }

    #[test]
    fn temporal_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, want) in [(100, (80, 20)), (1, (1, 0)), (5, (4, 1))] {
            let t = synth_trace("v", n, &mut rng, 0.1).unwrap();
            let (tr, te) = temporal_split(&t, 0.8).unwrap();
            assert_eq!((tr.len(), te.len()), want);
            if let (Some(a), Some(b)) = (tr.frames.last(), te.frames.first()) {
                assert!(a.t < b.t);
            }
        }
        assert!(temporal_split(&GazeTrace { video_id: "e".into(), frames: vec![] }, 0.8).is_err());
    }

    #[test]
    fn parse_accepts_and_rejects() {
        let t = parse_trace("v", "0,0.5,0.5\n1,0.6,0.5").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(parse_trace("v", &write_trace(&t)).unwrap(), t);

        match parse_trace("v", "0,0.5,0.5\n1,1.5,0.2") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("out of range")),
            other => panic!("{other:?}"),
        }
        match parse_trace("v", "3,0.5,0.5\n3,0.4,0.2") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("does not follow")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trace("v", "0,0.5"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trace("v", "a,0.5,0.5"), Err(Error::Parse { line: 1, .. })));
    }
}
