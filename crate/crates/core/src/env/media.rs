use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One value per tile quality level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerQuality<T> {
    pub high: T,
    pub med: T,
    pub low: T,
}

impl<T: Copy> PerQuality<T> {
    pub const fn new(high: T, med: T, low: T) -> Self {
        PerQuality { high, med, low }
    }

    pub fn splat(v: T) -> Self {
        PerQuality { high: v, med: v, low: v }
    }

    /// `[high, med, low]`
    pub fn to_array(self) -> [T; 3] {
        [self.high, self.med, self.low]
    }

    pub fn from_array([high, med, low]: [T; 3]) -> Self {
        PerQuality { high, med, low }
    }

    pub fn map<U: Copy>(self, f: impl Fn(T) -> U) -> PerQuality<U> {
        PerQuality { high: f(self.high), med: f(self.med), low: f(self.low) }
    }

    pub fn zip<U: Copy, V: Copy>(self, other: PerQuality<U>, f: impl Fn(T, U) -> V) -> PerQuality<V> {
        PerQuality { high: f(self.high, other.high), med: f(self.med, other.med), low: f(self.low, other.low) }
    }
}

impl PerQuality<f64> {
    pub fn sum(self) -> f64 {
        self.high + self.med + self.low
    }
}

impl PerQuality<u32> {
    pub fn total(self) -> u32 {
        self.high + self.med + self.low
    }

    pub fn as_f64(self) -> PerQuality<f64> {
        self.map(f64::from)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeModel {
    /// γ^cpu per quality, cycles per bit.
    pub cpu_cycles_per_bit: PerQuality<f64>,
    /// γ^gpu, work units per pixel.
    pub gpu_cost: f64,
    /// cycles/s
    pub cpu_capacity: f64,
    /// pixels/s
    pub gpu_capacity: f64,
    pub pixels_per_tile: PerQuality<f64>,
    pub frames_per_gop: u32,
    pub tiles_per_frame: u32,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel {
            cpu_cycles_per_bit: PerQuality::new(180.0, 190.0, 200.0),
            gpu_cost: 1.0,
            cpu_capacity: 15e9,
            gpu_capacity: 15e9,
            pixels_per_tile: PerQuality::new(3840.0 * 2160.0, 1920.0 * 1080.0, 1280.0 * 720.0).map(|p| p / 16.0),
            frames_per_gop: 16,
            tiles_per_frame: 16,
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = self.cpu_cycles_per_bit.to_array().into_iter().all(positive)
            && self.pixels_per_tile.to_array().into_iter().all(positive)
            && positive(self.gpu_cost)
            && positive(self.cpu_capacity)
            && positive(self.gpu_capacity)
            && self.frames_per_gop > 0
            && self.tiles_per_frame > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid compute model {self:?}")))
        }
    }
}

/// Open intervals the resolution ratios must lie in.
pub const RATIO_BOUNDS: PerQuality<(f64, f64)> = PerQuality::new((0.75, 1.0), (0.25, 0.5), (0.125, 0.25));

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GopPlan {
    pub tile_counts: PerQuality<u32>,
    pub resolution_ratios: PerQuality<f64>,
    /// B_{q,max}, bits per tile.
    pub max_bitrates: PerQuality<f64>,
}

impl GopPlan {
    pub fn validate(&self, tiles_per_frame: u32) -> Result<()> {
        if self.tile_counts.total() != tiles_per_frame {
            return Err(Error::Domain(format!("tile counts {:?} do not sum to {tiles_per_frame}", self.tile_counts)));
        }
        let inside = self.resolution_ratios.zip(RATIO_BOUNDS, |r, (lo, hi)| lo < r && r < hi);
        if !(inside.high && inside.med && inside.low) {
            return Err(Error::Domain(format!("resolution ratios {:?} out of bounds", self.resolution_ratios)));
        }
        Ok(())
    }

    /// β_q = B_{q,max}·r_q
    pub fn bitrates(&self) -> PerQuality<f64> {
        self.max_bitrates.zip(self.resolution_ratios, |b, r| b * r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GopData {
    pub per_quality: PerQuality<f64>,
    pub total: f64,
}

/// d_q = M_q·β_q·F
pub fn gop_data_size(plan: &GopPlan, frames: u32) -> GopData {
    let per_quality = plan.tile_counts.as_f64().zip(plan.bitrates(), |m, b| m * b * f64::from(frames));
    GopData { per_quality, total: per_quality.sum() }
}

/// Pixels rendered for one GoP.
pub fn gop_pixels(plan: &GopPlan, compute: &ComputeModel) -> f64 {
    let per_frame = plan.tile_counts.as_f64().zip(compute.pixels_per_tile, |m, p| m * p).sum();
    f64::from(compute.frames_per_gop) * per_frame
}

/// Compute capacity granted to one user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Allocation {
    pub cpu_hz: f64,
    pub gpu_px_per_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub comm_s: f64,
    pub render_s: f64,
    pub encode_s: f64,
    pub total_s: f64,
    pub threshold_s: f64,
    pub compression: f64,
    /// Some component hit the latency cap because its resource share was
    /// (close to) zero; the user counts as a violation.
    pub saturated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyLimits {
    pub threshold_s: f64,
    pub compression: f64,
    /// Per-component ceiling standing in for an unbounded delay.
    pub cap_s: f64,
}

fn capped(work: f64, capacity: f64, cap: f64) -> (f64, bool) {
    if work <= 0.0 {
        return (0.0, false);
    }
    let t = if capacity > 0.0 { work / capacity } else { f64::INFINITY };
    if t > cap {
        (cap, true)
    } else {
        (t, false)
    }
}

/// Transmission, rendering and encoding delays of one GoP. Encoding is charged
/// on compressed bits with the per-quality cycle cost mixed by data share.
pub fn latencies(
    plan: &GopPlan,
    compute: &ComputeModel,
    alloc: Allocation,
    rate_bps: f64,
    limits: LatencyLimits,
) -> LatencyBreakdown {
    let data = gop_data_size(plan, compute.frames_per_gop);
    let cr = limits.compression;
    let (comm_s, sat_c) = capped(data.total / cr, rate_bps, limits.cap_s);
    let pixels = gop_pixels(plan, compute);
    let (render_s, sat_r) = capped(compute.gpu_cost * pixels, alloc.gpu_px_per_s, limits.cap_s);
    let cycles = data.per_quality.zip(compute.cpu_cycles_per_bit, |d, g| g * d).sum() / cr;
    let (encode_s, sat_e) = capped(cycles, alloc.cpu_hz, limits.cap_s);
    LatencyBreakdown {
        comm_s,
        render_s,
        encode_s,
        total_s: comm_s + render_s + encode_s,
        threshold_s: limits.threshold_s,
        compression: cr,
        saturated: sat_c || sat_r || sat_e,
    }
}
