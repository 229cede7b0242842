//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, exit status 1
//! if any fails. Runs without the libtest harness so the lines always print.

use std::time::Instant;

use cpe::{
    alloc_track::CountingAlloc,
    bench::{bench_one, BenchOptions, BenchRecord, BenchRow},
    selftest::{self, CheckResult},
};
use cpe_core::{Model, ModelConfig};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const TARGET_PARAMS: f64 = 1.14e6;
const PARAM_BAND: f64 = 0.15;
const SCALING_BAND: (f64, f64) = (0.5, 2.0);
const GIB: usize = 1 << 30;
const LIMIT_4K: usize = 3 * GIB;
const LIMIT_8K: usize = 8 * GIB;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, passed: bool, detail: impl AsRef<str>) {
        if !passed {
            self.failures += 1;
        }
        println!("[{}] {name}: {}", if passed { "PASS" } else { "FAIL" }, detail.as_ref());
    }

    fn checks(&mut self, name: &str, results: &[CheckResult]) {
        let passed = results.iter().all(|r| r.passed);
        let detail: Vec<String> = match results {
            [only] => vec![only.detail.clone()],
            _ => results.iter().map(|r| format!("{} ({})", r.name, r.detail)).collect(),
        };
        self.line(name, passed, detail.join("; "));
    }
}

fn run_row(model: &Model, w: usize, h: usize, iters: usize) -> Result<BenchRecord, String> {
    let opts = BenchOptions {
        resolutions: vec![(w, h)],
        iters,
        warmup: 0,
        mem_limit: None,
    };
    match bench_one(model, w, h, &opts) {
        BenchRow::Done(r) => Ok(r),
        other => Err(format!("{other:?}")),
    }
}

fn architecture(report: &mut Report, model: &Model) {
    let sizes = [512usize, 1024, 2048];
    let rows: Result<Vec<BenchRecord>, String> = sizes.iter().map(|&s| run_row(model, s, s, 3)).collect();
    let rows = match rows {
        Ok(r) => r,
        Err(e) => return report.line("latent invariance and native linear scaling", false, e),
    };
    let latent = rows[0].counters.latent;
    let invariant = rows.iter().all(|r| r.counters.latent == latent);
    let mut detail = vec![format!(
        "latent macs {} / ops {} at {}",
        latent.macs,
        latent.total(),
        sizes.map(|s| format!("{s}²")).join(", ")
    )];
    let mut linear = true;
    for pair in rows.windows(2) {
        let t = pair[1].stages.native().as_secs_f64() / pair[0].stages.native().as_secs_f64();
        let p = pair[1].pixels() as f64 / pair[0].pixels() as f64;
        let norm = t / p;
        linear &= (SCALING_BAND.0..=SCALING_BAND.1).contains(&norm);
        detail.push(format!(
            "{}²→{}² native {:.1}→{:.1} ms, time ratio {t:.2} for {p:.0}x pixels ({norm:.2}x linear)",
            pair[0].width,
            pair[1].width,
            pair[0].stages.native().as_secs_f64() * 1e3,
            pair[1].stages.native().as_secs_f64() * 1e3
        ));
    }
    report.line("latent invariance and native linear scaling", invariant && linear, detail.join("; "));
}

fn host_memory() -> String {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|m| m.lines().find(|l| l.starts_with("MemTotal:")).map(|l| l.split_whitespace().nth(1).unwrap_or("?").to_string()))
        .and_then(|kb| kb.parse::<f64>().ok())
        .map_or_else(|| String::from("unknown host memory"), |kb| format!("host {:.1} GiB", kb / (1 << 20) as f64))
}

fn memory(report: &mut Report, model: &Model) {
    let mut passed = true;
    let mut detail = Vec::new();
    for (w, h, limit) in [(3840, 2160, LIMIT_4K), (7680, 4320, LIMIT_8K)] {
        match run_row(model, w, h, 1) {
            Ok(r) => {
                passed &= r.peak_bytes <= limit;
                detail.push(format!(
                    "{w}x{h} peak {:.3} GiB ≤ {} GiB ({}), {:.1} s",
                    r.peak_bytes as f64 / GIB as f64,
                    limit / GIB,
                    r.mem_source.as_str(),
                    r.wall.as_secs_f64()
                ));
            }
            Err(e) => {
                passed = false;
                detail.push(format!("{w}x{h} did not complete: {e}"));
            }
        }
    }
    detail.push(host_memory());
    report.line("peak working memory at 4K and 8K", passed, detail.join("; "));
}

fn main() {
    let t0 = Instant::now();
    let mut report = Report { failures: 0 };

    report.checks("clifford scalar-inner theorem", &[selftest::clifford_theorem(selftest::CLIFFORD_TRIALS)]);
    report.checks("clifford algebra laws", &[selftest::algebra_laws(selftest::ALGEBRA_TRIALS)]);
    report.checks("retinex invariants", &[selftest::retinex_invariants(selftest::RETINEX_PIXELS)]);
    let kernels = selftest::kernel_oracles(selftest::KERNEL_CASES);
    let total: std::time::Duration = kernels.iter().map(|r| r.elapsed).sum();
    let within = total < selftest::KERNEL_BUDGET;
    report.checks("kernel oracle suite", &kernels);
    report.line(
        "kernel oracle suite runtime",
        within,
        format!("{:.0} ms < {} s", total.as_secs_f64() * 1e3, selftest::KERNEL_BUDGET.as_secs()),
    );
    report.checks("gradient checks", &[selftest::gradient_checks(selftest::GRAD_SEEDS)]);

    let model = Model::seeded(ModelConfig::default(), 2024).expect("default model");
    architecture(&mut report, &model);
    memory(&mut report, &model);

    let n = model.param_count() as f64;
    let dev = n / TARGET_PARAMS - 1.0;
    report.line(
        "parameter budget",
        dev.abs() <= PARAM_BAND,
        format!("{n} params, {:+.2}% vs 1.14M (band ±15%)", dev * 100.0),
    );
    report.checks("metric sanity", &[selftest::metric_sanity()]);

    println!(
        "acceptance: {} failed, {:.1} s",
        report.failures,
        t0.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
