//! Resolution-scaling benchmark.
//!
//! Each row runs the full pipeline on a synthetic noise image with the stages
//! timed separately. Rows are printed as single-line `key=value` records.

use std::{
    fmt::Write as _,
    time::{Duration, Instant},
};

use cpe_core::{
    pyramid::{build_base, effective_receptive_field, latent_features},
    reconstruct::{apply_retinex, predict_params_streaming, stripe_rows},
    rng::Lcg,
    Model, OpCounter, Shape, StageCounters, Tensor,
};

use crate::alloc_track::{MemorySource, PeakProbe};

/// Parse `WxH` (also accepts `X` and `×`).
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let s = s.trim();
    let (w, h) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("resolution {s:?} is not of the form WxH"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("resolution {s:?}: {v:?} is not a positive integer"))
    };
    Ok((parse(w)?, parse(h)?))
}

pub fn parse_resolutions(list: &str) -> Result<Vec<(usize, usize)>, String> {
    list.split(',').filter(|p| !p.trim().is_empty()).map(parse_resolution).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub base: Duration,
    pub pyramid: Duration,
    pub heads: Duration,
    pub reconstruct: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.base + self.pyramid + self.heads + self.reconstruct
    }

    /// Everything that touches native resolution.
    pub fn native(&self) -> Duration {
        self.base + self.heads + self.reconstruct
    }
}

/// One timed pass through the pipeline.
pub fn run_staged(x: &Tensor, model: &Model, counters: &mut StageCounters) -> cpe_core::Result<(Tensor, StageTimes)> {
    let cfg = model.config.pyramid_config();
    let s = x.shape();
    let t0 = Instant::now();
    let base = build_base(x, &cfg, &mut counters.base)?;
    let t1 = Instant::now();
    let features = latent_features(&base, &model.levels, &cfg, &mut counters.latent)?;
    let t2 = Instant::now();
    let params = predict_params_streaming(&features, s.height, s.width, &model.heads, &mut counters.heads)?;
    let t3 = Instant::now();
    let out = apply_retinex(x, &params, &mut counters.reconstruct)?;
    let t4 = Instant::now();
    Ok((
        out,
        StageTimes {
            base: t1 - t0,
            pyramid: t2 - t1,
            heads: t3 - t2,
            reconstruct: t4 - t3,
        },
    ))
}

/// Conservative upper estimate of the bytes one enhancement allocates at
/// `width × height`, used to refuse rows that cannot fit.
pub fn estimate_peak_bytes(model: &Model, width: usize, height: usize) -> usize {
    let cfg = &model.config;
    let f = std::mem::size_of::<f32>();
    let px = width * height;
    // Input, output, illumination, Γ and G maps.
    let native = (3 + 3 + 1 + 2) * px;
    let hpass: usize = cfg.level_sizes().iter().map(|s| cfg.base_channels * s * width).sum();
    let rows = stripe_rows(width).min(height) + 2;
    // Feature block plus each head's hidden and output planes.
    let stripe = rows * width * (cfg.head_in_channels() + 2 * (cfg.head_channels + cfg.head_outputs + 1));
    let top = cfg.level_sizes().last().copied().unwrap_or(cfg.base_size);
    let latent = 8 * cfg.base_channels * cfg.growth.pow(cfg.depth as u32) * top * top;
    (native + hpass + stripe + latent) * f + model.param_count() * f
}

/// Deterministic uniform noise in [0, 1]; `None` if the buffer cannot be reserved.
pub fn noise_image(width: usize, height: usize, seed: u64) -> Option<Tensor> {
    let shape = Shape::new(1, 3, height, width);
    let mut data: Vec<f32> = Vec::new();
    data.try_reserve_exact(shape.len()).ok()?;
    let mut rng = Lcg::new(seed);
    data.extend((0..shape.len()).map(|_| rng.next_f64() as f32));
    Tensor::new(shape, data).ok()
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub width: usize,
    pub height: usize,
    pub iters: usize,
    /// Median wall time over the measured iterations.
    pub wall: Duration,
    /// Stage split of the median iteration.
    pub stages: StageTimes,
    pub peak_bytes: usize,
    pub mem_source: MemorySource,
    pub counters: StageCounters,
}

impl BenchRecord {
    pub fn fps(&self) -> f64 {
        1.0 / self.wall.as_secs_f64()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Debug)]
pub enum BenchRow {
    Done(BenchRecord),
    Oom {
        width: usize,
        height: usize,
        needed: usize,
        limit: Option<usize>,
    },
    Failed {
        width: usize,
        height: usize,
        error: String,
    },
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub resolutions: Vec<(usize, usize)>,
    pub iters: usize,
    pub warmup: usize,
    /// Rows whose estimated footprint exceeds this are reported as OOM.
    pub mem_limit: Option<usize>,
}

/// `MemAvailable` from `/proc/meminfo`, in bytes.
pub fn available_memory() -> Option<usize> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn bench_one(model: &Model, width: usize, height: usize, opts: &BenchOptions) -> BenchRow {
    let needed = estimate_peak_bytes(model, width, height);
    if opts.mem_limit.is_some_and(|limit| needed > limit) {
        return BenchRow::Oom {
            width,
            height,
            needed,
            limit: opts.mem_limit,
        };
    }
    let probe = PeakProbe::start();
    let Some(x) = noise_image(width, height, (width as u64) << 32 | height as u64) else {
        return BenchRow::Oom {
            width,
            height,
            needed,
            limit: opts.mem_limit,
        };
    };
    let mut samples = Vec::with_capacity(opts.iters);
    let mut counters = StageCounters::default();
    for i in 0..opts.warmup + opts.iters.max(1) {
        let mut c = StageCounters::default();
        let start = Instant::now();
        let result = run_staged(&x, model, &mut c);
        let wall = start.elapsed();
        match result {
            Ok((out, stages)) => {
                drop(out);
                if i >= opts.warmup {
                    samples.push((wall, stages));
                }
                counters = c;
            }
            Err(e) => {
                return BenchRow::Failed {
                    width,
                    height,
                    error: e.to_string(),
                }
            }
        }
    }
    drop(x);
    let (peak_bytes, mem_source) = probe.finish();
    samples.sort_by_key(|(wall, _)| *wall);
    let (wall, stages) = samples[samples.len() / 2];
    BenchRow::Done(BenchRecord {
        width,
        height,
        iters: samples.len(),
        wall,
        stages,
        peak_bytes,
        mem_source,
        counters,
    })
}

pub fn run_bench(model: &Model, opts: &BenchOptions) -> Vec<BenchRow> {
    opts.resolutions
        .iter()
        .map(|&(w, h)| bench_one(model, w, h, opts))
        .collect()
}

/// True when every completed row recorded the same latent-stage counters.
pub fn latent_invariant(rows: &[BenchRow]) -> bool {
    let mut latent = rows.iter().filter_map(|r| match r {
        BenchRow::Done(rec) => Some(rec.counters.latent),
        _ => None,
    });
    match latent.next() {
        None => true,
        Some(first) => latent.all(|c| c == first),
    }
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

pub fn format_row(row: &BenchRow, model: &Model) -> String {
    let mut s = String::new();
    match row {
        BenchRow::Done(r) => {
            let (erf_h, erf_w) = effective_receptive_field(&model.config.pyramid_config(), (r.height, r.width));
            let native: OpCounter = r.counters.native();
            let _ = write!(
                s,
                "width={} height={} status=ok iters={} wall_ms={} base_ms={} pyramid_ms={} heads_ms={} \
                 reconstruct_ms={} native_ms={} fps={:.3} peak_bytes={} mem_source={} latent_macs={} \
                 latent_ops={} native_macs={} native_ops={} erf_h={} erf_w={}",
                r.width,
                r.height,
                r.iters,
                ms(r.wall),
                ms(r.stages.base),
                ms(r.stages.pyramid),
                ms(r.stages.heads),
                ms(r.stages.reconstruct),
                ms(r.stages.native()),
                r.fps(),
                r.peak_bytes,
                r.mem_source.as_str(),
                r.counters.latent.macs,
                r.counters.latent.total(),
                native.macs,
                native.total(),
                erf_h,
                erf_w,
            );
        }
        BenchRow::Oom {
            width,
            height,
            needed,
            limit,
        } => {
            let _ = write!(s, "width={width} height={height} status=oom estimated_bytes={needed}");
            if let Some(l) = limit {
                let _ = write!(s, " limit_bytes={l}");
            }
        }
        BenchRow::Failed { width, height, error } => {
            let _ = write!(s, "width={width} height={height} status=error error={error:?}");
        }
    }
    s
}

pub fn format_report(rows: &[BenchRow], model: &Model) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format_row(r, model));
        s.push('\n');
    }
    let _ = writeln!(s, "latent_invariant={}", latent_invariant(rows));
    s
}
