//! Wall-clock benchmarks: attention scaling in the number of grid positions and
//! training throughput per model variant.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayer, Elements, LayerKind};
use crate::autodiff::Tape;
use crate::config::{Config, Variant};
use crate::data::{DatasetHandle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::Trainer;

/// Attention flavour being timed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Every grid position attends to every other (`Y = X`).
    SelfAttention,
    Simplex,
    Duplex,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [AttentionVariant::SelfAttention, AttentionVariant::Simplex, AttentionVariant::Duplex];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::SelfAttention => "self",
            AttentionVariant::Simplex => "simplex",
            AttentionVariant::Duplex => "duplex",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTiming {
    pub variant: AttentionVariant,
    pub n: usize,
    pub m: usize,
    pub median_secs: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("a slope fit needs at least 3 points, got {}", points.len())));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Median forward time of one attention layer with batch 1, `n` grid rows,
/// `m` latent rows and width `d`.
pub fn time_attention(variant: AttentionVariant, n: usize, m: usize, d: usize, repeats: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let kind = match variant {
        AttentionVariant::Duplex => LayerKind::Duplex,
        _ => LayerKind::Simplex,
    };
    let layer = AttentionLayer::new(&mut store, &mut rng, "bench", kind, d, 1)?;
    let x = Tensor::<f32>::randn([1, n, d], &mut rng);
    let y = Tensor::<f32>::randn([1, m, d], &mut rng);
    let (xpos, ypos) = (Tensor::<f32>::zeros([n, d]), Tensor::<f32>::zeros([m, d]));
    let run = || -> Result<()> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let xe = Elements::new(tape.constant(x.clone()), tape.constant(xpos.clone()));
        let out = match variant {
            AttentionVariant::SelfAttention => layer.simplex_update(&p, xe, xe)?.out,
            _ => {
                let ye = Elements::new(tape.constant(y.clone()), tape.constant(ypos.clone()));
                layer.forward(&p, xe, ye)?.x
            }
        };
        std::hint::black_box(out.value());
        Ok(())
    };
    run()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Timings for every variant over `n_values`, plus the fitted slope per variant.
pub fn bench_attention(
    n_values: &[usize],
    m: usize,
    d: usize,
    repeats: usize,
) -> Result<(Vec<AttentionTiming>, Vec<(AttentionVariant, f64)>)> {
    if repeats < 5 {
        return Err(Error::invalid("at least 5 repeats are needed for a stable median"));
    }
    if n_values.len() < 3 {
        return Err(Error::invalid("at least 3 grid sizes are needed to fit a slope"));
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for variant in AttentionVariant::ALL {
        let mut pts = Vec::new();
        for &n in n_values {
            let t = time_attention(variant, n, m, d, repeats)?;
            rows.push(AttentionTiming {
                variant,
                n,
                m,
                median_secs: t,
            });
            pts.push((n as f64, t));
        }
        slopes.push((variant, loglog_slope(&pts)?));
    }
    Ok((rows, slopes))
}

pub fn attention_csv(rows: &[AttentionTiming], slopes: &[(AttentionVariant, f64)]) -> String {
    let mut out = String::from("variant,n,m,median_secs,slope\n");
    for r in rows {
        let slope = slopes.iter().find(|s| s.0 == r.variant).map(|s| s.1).unwrap_or(f64::NAN);
        let _ = writeln!(out, "{},{},{},{:.9},{:.4}", r.variant.name(), r.n, r.m, r.median_secs, slope);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub variant: Variant,
    pub imgs_per_sec: f64,
}

/// Training images per second of each variant under otherwise identical
/// settings, measured over `steps` steps after one warm-up step.
pub fn bench_throughput(base: &Config, variants: &[Variant], steps: usize) -> Result<Vec<Throughput>> {
    if steps == 0 {
        return Err(Error::invalid("throughput needs at least one timed step"));
    }
    let dataset = DatasetHandle::synthetic(SyntheticSpec::new(base.resolution, base.seed), base.synthetic_size, base.seed)?;
    let mut out = Vec::new();
    for &variant in variants {
        let mut c = base.clone();
        c.variant = variant;
        let mut trainer = Trainer::<f32>::new(&c, &dataset)?;
        trainer.step()?;
        let t = Instant::now();
        for _ in 0..steps {
            trainer.step()?;
        }
        let secs = t.elapsed().as_secs_f64();
        out.push(Throughput {
            variant,
            imgs_per_sec: (steps * c.batch) as f64 / secs,
        });
    }
    Ok(out)
}

pub fn throughput_csv(rows: &[Throughput]) -> String {
    let base = rows.iter().find(|r| r.variant == Variant::StyleGan2).map(|r| r.imgs_per_sec);
    let mut out = String::from("variant,imgs_per_sec,baseline_ratio\n");
    for r in rows {
        let ratio = base.map(|b| format!("{:.4}", b / r.imgs_per_sec)).unwrap_or_default();
        let _ = writeln!(out, "{},{:.4},{}", r.variant.name(), r.imgs_per_sec, ratio);
    }
    out
}
