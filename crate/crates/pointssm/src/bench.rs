//! Block throughput against sequence length on a predefined token sequence
//! (no tokenizer).

use std::fmt::Write as _;
use std::time::Instant;

use pointssm_core::numerics::ParamStore;
use pointssm_core::ssm::infer::{flops_estimate, peak_bytes_estimate, InferenceBlock, Real};
use pointssm_core::ssm::{init_block, BlockConfig, BlockKind};
use pointssm_core::Error as CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::BenchConfig;
use crate::error::CliResult;

pub const BENCH_HEADER: &str = "length,block,median_ms,flops_estimate,peak_bytes_estimate";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub block: BlockKind,
    /// `None` when the row was skipped for memory.
    pub median_ms: Option<f64>,
    pub flops: u64,
    /// Flops of the terms quadratic in length.
    pub quadratic_flops: u64,
    pub peak_bytes: u64,
}

pub fn block_config(cfg: &BenchConfig, kind: BlockKind) -> BlockConfig {
    BlockConfig {
        d_state: cfg.d_state,
        ..BlockConfig::new(cfg.d_model, kind)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

type Elem = f32;

/// Times every (block, length) pair. Rows over the memory limit, or whose
/// buffers cannot be allocated, are kept with no timing.
pub fn run_bench(
    cfg: &BenchConfig,
    mut progress: impl FnMut(&BenchRow),
) -> CliResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &kind in &cfg.blocks {
        let bcfg = block_config(cfg, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        init_block(&mut store, "", &bcfg, &mut rng)?;
        let block = InferenceBlock::<Elem>::from_store(&store, "", &bcfg)?;
        for &len in &cfg.lengths {
            let f = flops_estimate(&bcfg, len);
            let peak = peak_bytes_estimate(&bcfg, len, Elem::BYTES);
            let mut row = BenchRow {
                length: len,
                block: kind,
                median_ms: None,
                flops: f.total(),
                quadratic_flops: f.quadratic,
                peak_bytes: peak,
            };
            if peak <= cfg.max_bytes {
                let z: Vec<Elem> = (0..len * cfg.d_model)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                row.median_ms = time_block(&block, &z, len, cfg.repeat)?;
            }
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn time_block<T: Real>(
    block: &InferenceBlock<T>,
    z: &[T],
    len: usize,
    repeat: usize,
) -> CliResult<Option<f64>> {
    let mut times = Vec::with_capacity(repeat);
    // one untimed warm-up pass
    for i in 0..=repeat {
        let t = Instant::now();
        match block.forward(z, len) {
            Ok(out) => std::hint::black_box(out),
            Err(CoreError::OutOfMemory { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if i > 0 {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(Some(median(times)))
}

/// `length,block,median_ms,flops_estimate,peak_bytes_estimate`, with
/// `oom` in place of the timing for skipped rows.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let ms = r
            .median_ms
            .map_or_else(|| "oom".to_string(), |m| format!("{m:.3}"));
        let _ = writeln!(
            out,
            "{},{},{ms},{},{}",
            r.length, r.block, r.flops, r.peak_bytes
        );
    }
    out
}

/// Ratios between consecutive rows of one block whose lengths double.
#[derive(Clone, Debug, PartialEq)]
pub struct Doubling {
    pub block: BlockKind,
    pub from: usize,
    pub time_ratio: Option<f64>,
    pub flops_ratio: f64,
    /// Ratio of the quadratic-in-length term, when there is one.
    pub quadratic_ratio: Option<f64>,
}

pub fn doublings(rows: &[BenchRow]) -> Vec<Doubling> {
    let mut out = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.block != b.block || b.length != 2 * a.length {
            continue;
        }
        out.push(Doubling {
            block: a.block,
            from: a.length,
            time_ratio: a.median_ms.zip(b.median_ms).map(|(x, y)| y / x),
            flops_ratio: b.flops as f64 / a.flops as f64,
            quadratic_ratio: (a.quadratic_flops > 0)
                .then(|| b.quadratic_flops as f64 / a.quadratic_flops as f64),
        });
    }
    out
}

pub fn doubling_report(d: &[Doubling]) -> String {
    let mut s = String::new();
    for x in d {
        let t = x
            .time_ratio
            .map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
        let _ = write!(
            s,
            "doubling {} {}->{}: time x{t}, flops x{:.4}",
            x.block,
            x.from,
            2 * x.from,
            x.flops_ratio
        );
        if let Some(q) = x.quadratic_ratio {
            let _ = write!(s, ", quadratic term x{q:.4}");
        }
        s.push('\n');
    }
    s
}
