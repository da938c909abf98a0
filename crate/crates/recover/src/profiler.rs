//! Analytic FLOP/byte models per architecture component plus runtime
//! instrumentation counters.
//!
//! Conventions (stated in every emitted report): one multiply-accumulate is
//! counted as 2 FLOPs, tensor payloads are 4 bytes per element, bias adds are
//! not counted. The correlation volume follows the quadratic all-pairs model;
//! its pooled levels use floor division for the spatial dimensions, exactly
//! matching what the runtime computes.

use crate::costvolume::CostVolumeMode;
use crate::netblocks::{ConvShape, Model, ModelConfig};
use crate::num::Scalar;
use crate::tensor::Tensor;
use std::io::Write;

pub const MAC_FLOPS: u64 = 2;
pub const BYTES_PER_ELEMENT: u64 = 4;

/// Runtime instrumentation hooks. Counters are thread-local: a measurement
/// session observes exactly the work done on its own thread, which is how
/// the single-threaded inference path runs. Disabled, the hooks cost one
/// thread-local flag read.
pub mod track {
    use std::cell::Cell;

    thread_local! {
        pub(super) static ENABLED: Cell<bool> = const { Cell::new(false) };
        pub(super) static LIVE_BYTES: Cell<i64> = const { Cell::new(0) };
        pub(super) static PEAK_BYTES: Cell<i64> = const { Cell::new(0) };
        pub(super) static CORRELATE_CALLS: Cell<u64> = const { Cell::new(0) };
        pub(super) static CORRELATE_FLOPS: Cell<u64> = const { Cell::new(0) };
        pub(super) static POOLING_FLOPS: Cell<u64> = const { Cell::new(0) };
        pub(super) static LOOKUP_SAMPLES: Cell<u64> = const { Cell::new(0) };
        pub(super) static COSTVOL_ELEMENTWISE: Cell<u64> = const { Cell::new(0) };
        pub(super) static CONV_FLOPS: Cell<u64> = const { Cell::new(0) };
    }

    #[inline]
    pub(crate) fn enabled() -> bool {
        ENABLED.with(|e| e.get())
    }

    #[inline]
    fn bump(cell: &'static std::thread::LocalKey<Cell<u64>>, by: u64) {
        cell.with(|c| c.set(c.get() + by));
    }

    #[inline]
    pub(crate) fn alloc(bytes: usize) {
        if enabled() {
            LIVE_BYTES.with(|l| {
                let live = l.get() + bytes as i64;
                l.set(live);
                PEAK_BYTES.with(|p| p.set(p.get().max(live)));
            });
        }
    }

    #[inline]
    pub(crate) fn free(bytes: usize) {
        if enabled() {
            LIVE_BYTES.with(|l| l.set(l.get() - bytes as i64));
        }
    }

    #[inline]
    pub(crate) fn correlate(flops: u64) {
        if enabled() {
            bump(&CORRELATE_CALLS, 1);
            bump(&CORRELATE_FLOPS, flops);
        }
    }

    #[inline]
    pub(crate) fn pooling(flops: u64) {
        if enabled() {
            bump(&POOLING_FLOPS, flops);
        }
    }

    #[inline]
    pub(crate) fn lookup(samples: u64) {
        if enabled() {
            bump(&LOOKUP_SAMPLES, samples);
        }
    }

    #[inline]
    pub(crate) fn costvol_elementwise(ops: u64) {
        if enabled() {
            bump(&COSTVOL_ELEMENTWISE, ops);
        }
    }

    #[inline]
    pub(crate) fn conv(flops: u64) {
        if enabled() {
            bump(&CONV_FLOPS, flops);
        }
    }
}

/// Counters collected by one measurement session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub correlate_calls: u64,
    pub correlate_flops: u64,
    pub pooling_flops: u64,
    pub lookup_samples: u64,
    pub lookup_flops: u64,
    pub costvol_elementwise: u64,
    pub conv_flops: u64,
    pub peak_live_bytes: u64,
}

impl Counters {
    /// Everything attributable to the cost-volume path.
    pub fn costvolume_flops(&self) -> u64 {
        self.correlate_flops + self.pooling_flops + self.lookup_flops + self.costvol_elementwise
    }

    pub fn total_flops(&self) -> u64 {
        self.conv_flops + self.costvolume_flops()
    }
}

/// Exclusive (per thread) runtime measurement scope. Counters and the
/// live-byte watermark reset at construction; `finish()` returns the
/// collected values. Run the measured computation on the session's thread.
pub struct MeasureSession {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl MeasureSession {
    pub fn begin() -> Self {
        track::LIVE_BYTES.with(|c| c.set(0));
        track::PEAK_BYTES.with(|c| c.set(0));
        track::CORRELATE_CALLS.with(|c| c.set(0));
        track::CORRELATE_FLOPS.with(|c| c.set(0));
        track::POOLING_FLOPS.with(|c| c.set(0));
        track::LOOKUP_SAMPLES.with(|c| c.set(0));
        track::COSTVOL_ELEMENTWISE.with(|c| c.set(0));
        track::CONV_FLOPS.with(|c| c.set(0));
        track::ENABLED.with(|c| c.set(true));
        MeasureSession { _not_send: std::marker::PhantomData }
    }

    pub fn finish(self) -> Counters {
        track::ENABLED.with(|c| c.set(false));
        let lookup_samples = track::LOOKUP_SAMPLES.with(|c| c.get());
        Counters {
            correlate_calls: track::CORRELATE_CALLS.with(|c| c.get()),
            correlate_flops: track::CORRELATE_FLOPS.with(|c| c.get()),
            pooling_flops: track::POOLING_FLOPS.with(|c| c.get()),
            lookup_samples,
            lookup_flops: lookup_samples * BILINEAR_SAMPLE_FLOPS,
            costvol_elementwise: track::COSTVOL_ELEMENTWISE.with(|c| c.get()),
            conv_flops: track::CONV_FLOPS.with(|c| c.get()),
            peak_live_bytes: track::PEAK_BYTES.with(|c| c.get()).max(0) as u64,
        }
    }
}

/// Cost of one bilinear sample: 4 reads combined by a weighted sum.
pub const BILINEAR_SAMPLE_FLOPS: u64 = 7;

/// FLOPs of a dense convolution producing an `h_out x w_out` map.
/// For grouped convolutions pass the per-output-channel fan-in as `c_in`.
pub fn conv_flops(k_h: u64, k_w: u64, c_in: u64, c_out: u64, h_out: u64, w_out: u64) -> u64 {
    MAC_FLOPS * k_h * k_w * c_in * c_out * h_out * w_out
}

/// Analytic cost of building the all-pairs correlation pyramid on an
/// `h x w` feature grid with `d` channels and `levels` pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostVolumeCost {
    /// 2 * d * (h*w)^2 for the all-pairs correlation itself.
    pub correlation_flops: u64,
    /// 4 FLOPs per pooled output element across levels 1..L-1.
    pub pooling_flops: u64,
    /// Payload bytes of all pyramid levels.
    pub bytes: u64,
    /// Payload bytes of the unpooled level alone.
    pub level0_bytes: u64,
}

impl CostVolumeCost {
    pub fn flops(&self) -> u64 {
        self.correlation_flops + self.pooling_flops
    }
}

pub fn costvolume_cost(h: u64, w: u64, d: u64, levels: u64) -> CostVolumeCost {
    let hw = h * w;
    let correlation_flops = MAC_FLOPS * d * hw * hw;
    let mut pooling_flops = 0u64;
    let mut bytes = 0u64;
    let (mut lh, mut lw) = (h, w);
    for l in 0..levels {
        bytes += BYTES_PER_ELEMENT * hw * lh * lw;
        if l + 1 < levels {
            let (nh, nw) = (lh / 2, lw / 2);
            pooling_flops += 4 * hw * nh * nw;
            lh = nh;
            lw = nw;
        }
    }
    CostVolumeCost {
        correlation_flops,
        pooling_flops,
        bytes,
        level0_bytes: BYTES_PER_ELEMENT * hw * hw,
    }
}

/// One row of a [`ComplexityReport`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentCost {
    pub component: String,
    pub flops: u64,
    pub activation_bytes: u64,
    pub parameter_bytes: u64,
}

/// Per-component analytic cost of a full flow prediction at `(H, W)`.
#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub rows: Vec<ComponentCost>,
    pub resolution: (usize, usize),
    pub config: ModelConfig,
}

impl ComplexityReport {
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_activation_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.activation_bytes).sum()
    }

    pub fn total_parameter_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.parameter_bytes).sum()
    }

    pub fn row(&self, component: &str) -> &ComponentCost {
        self.rows
            .iter()
            .find(|r| r.component == component)
            .unwrap_or_else(|| panic!("no component row named {component}"))
    }

    pub fn costvolume_share(&self) -> f64 {
        self.row("cost-volume").flops as f64 / self.total_flops() as f64
    }

    /// CSV with one row per component plus a totals row.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# convention: MAC = 2 FLOPs, payload = 4 bytes/element, bias adds not counted")?;
        writeln!(
            out,
            "# resolution = {}x{}, backbone = {}, mode = {}",
            self.resolution.0,
            self.resolution.1,
            self.config.backbone,
            self.config.mode.describe()
        )?;
        writeln!(out, "component,flops,activation_bytes,parameter_bytes")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.component, r.flops, r.activation_bytes, r.parameter_bytes)?;
        }
        writeln!(
            out,
            "total,{},{},{}",
            self.total_flops(),
            self.total_activation_bytes(),
            self.total_parameter_bytes()
        )
    }
}

fn sum_conv_costs(shapes: &[ConvShape]) -> (u64, u64, u64) {
    let mut flops = 0u64;
    let mut act = 0u64;
    let mut params = 0u64;
    for s in shapes {
        flops += conv_flops(
            s.k as u64,
            s.k as u64,
            (s.c_in / s.groups) as u64,
            s.c_out as u64,
            s.h_out as u64,
            s.w_out as u64,
        );
        act += BYTES_PER_ELEMENT * (s.c_out * s.h_out * s.w_out) as u64;
        params +=
            BYTES_PER_ELEMENT * (s.c_out * (s.c_in / s.groups) * s.k * s.k + s.c_out) as u64;
    }
    (flops, act, params)
}

/// Walk the declared architecture and price each component at `(H, W)` input
/// resolution. Rows: context-network, feature-encoder, cost-volume,
/// refinement, upsampler.
pub fn profile(cfg: &ModelConfig, height: usize, width: usize) -> ComplexityReport {
    assert!(height % 8 == 0 && width % 8 == 0, "resolution must be divisible by 8");
    let (h, w) = (height / 8, width / 8);
    let layout = crate::netblocks::conv_layout(cfg, height, width);

    let removed = matches!(cfg.mode, CostVolumeMode::Removed);
    let mut rows = Vec::new();

    let (f, a, p) = sum_conv_costs(&layout.context);
    rows.push(ComponentCost {
        component: "context-network".into(),
        flops: f,
        activation_bytes: a,
        parameter_bytes: p,
    });

    let (f, a, p) = if removed {
        (0, 0, 0)
    } else {
        // Two frames pass through the shared-weight encoder.
        let (f, a, p) = sum_conv_costs(&layout.feature_encoder);
        (2 * f, 2 * a, p)
    };
    rows.push(ComponentCost {
        component: "feature-encoder".into(),
        flops: f,
        activation_bytes: a,
        parameter_bytes: p,
    });

    let cv = if removed {
        ComponentCost {
            component: "cost-volume".into(),
            flops: 0,
            activation_bytes: 0,
            parameter_bytes: 0,
        }
    } else {
        let c = costvolume_cost(h as u64, w as u64, cfg.feature_dim as u64, cfg.levels as u64);
        let samples_per_iter =
            (cfg.levels as u64) * ((2 * cfg.radius + 1) * (2 * cfg.radius + 1)) as u64 * (h * w) as u64;
        let lookup = BILINEAR_SAMPLE_FLOPS * samples_per_iter * cfg.iterations as u64;
        ComponentCost {
            component: "cost-volume".into(),
            flops: c.flops() + lookup,
            activation_bytes: c.bytes,
            parameter_bytes: 0,
        }
    };
    rows.push(cv);

    let (f1, a1, p1) = sum_conv_costs(&layout.refinement_step);
    rows.push(ComponentCost {
        component: "refinement".into(),
        flops: f1 * cfg.iterations as u64,
        activation_bytes: a1 * cfg.iterations as u64,
        parameter_bytes: p1,
    });

    let (f2, a2, p2) = sum_conv_costs(&layout.upsampler);
    // Mask softmax (~5 flops/entry) plus the 3x3 convex combination
    // (9 MACs per fine pixel per flow channel), for N+1 upsampled flows.
    let n_up = cfg.iterations as u64 + 1;
    let mask_entries = (9 * 64 * h * w) as u64;
    let combine = MAC_FLOPS * 9 * 2 * (64 * h * w) as u64;
    rows.push(ComponentCost {
        component: "upsampler".into(),
        flops: n_up * (f2 + 5 * mask_entries + combine),
        activation_bytes: n_up * (a2 + BYTES_PER_ELEMENT * (2 * 64 * h * w) as u64),
        parameter_bytes: p2,
    });

    ComplexityReport { rows, resolution: (height, width), config: cfg.clone() }
}

/// Run one instrumented inference forward pass and collect runtime counters.
pub fn measure<T: Scalar>(model: &Model<T>, frame1: &Tensor<T>, frame2: &Tensor<T>) -> Counters {
    let session = MeasureSession::begin();
    let out = model.infer(frame1, frame2, model.config().iterations);
    drop(out);
    session.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_basics() {
        assert_eq!(conv_flops(1, 1, 1, 1, 1, 1), 2);
        assert_eq!(conv_flops(3, 3, 64, 64, 8, 12), 7_077_888);
        assert_eq!(
            conv_flops(3, 3, 17, 33, 10, 14) * 2,
            conv_flops(3, 3, 17, 33, 20, 14)
        );
    }

    #[test]
    fn costvolume_memory_arithmetic() {
        // Full HD: feature grid 240x135.
        let c = costvolume_cost(240, 135, 256, 4);
        assert_eq!(c.level0_bytes, 4_199_040_000);
        // Doubling the resolution scales the unpooled volume by 16.
        let c2 = costvolume_cost(480, 270, 256, 4);
        assert_eq!(c2.level0_bytes, 16 * c.level0_bytes);
    }

    #[test]
    fn costvolume_unit_grid() {
        let c = costvolume_cost(1, 1, 32, 4);
        assert_eq!(c.correlation_flops, 2 * 32);
        // Pooling of degenerate 1x1 levels produces no work.
        assert_eq!(c.pooling_flops, 0);
        assert_eq!(c.level0_bytes, 4);
    }

    #[test]
    fn quadratic_scaling_law() {
        // s^4 growth for power-of-two scale factors on divisible grids.
        let base = costvolume_cost(32, 48, 64, 4);
        let scaled = costvolume_cost(64, 96, 64, 4);
        assert_eq!(scaled.correlation_flops, 16 * base.correlation_flops);
        assert_eq!(scaled.flops(), 16 * base.flops());
    }
}
