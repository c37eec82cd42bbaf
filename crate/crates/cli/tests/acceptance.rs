//! Acceptance suite. Every criterion prints one PASS or FAIL line; the
//! process exits nonzero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- <name substring>`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use kq_cli::sweep::{kernel_error, scalar_error};
use kq_core::clustering::{kmeans_pp_init, lloyd, yinyang, KMeansOptions, PointSet};
use kq_core::codec::bits::pack;
use kq_core::codec::{measured_bits, pack_model, unpack_model, CompressedModel};
use kq_core::finetune::{apply_codebook_update, GradientBatch};
use kq_core::kernel::to_kernel_matrix;
use kq_core::metrics::{
    conventional_cost, huffman_estimate, kq_limit, layer_cost, theoretical_codebook, IndexHistogram,
};
use kq_core::quantizer::{binary_search_codebook, KernelCodebook, QuantizeOptions, SearchConfig};
use kq_core::scalar::{LayerPayload, QuantizedLayer, ScalarCodebook};
use kq_core::tensor::{LayerKind, ModelArchive, WeightTensor};

use common::{four_layer_model, kq, s};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Verdict,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------

/// (layer, in channels, out channels, codebook size, size % K, size % K+C,
/// bits K, bits K+C)
#[allow(clippy::type_complexity)]
const VGG_ROWS: [(&str, usize, usize, usize, f64, f64, f64, f64); 7] = [
    ("conv1", 3, 64, 60, 33.33, 7.94, 10.67, 2.54),
    ("conv3", 64, 128, 1008, 15.80, 5.78, 5.05, 1.84),
    ("conv5", 128, 256, 1088, 7.14, 4.44, 2.28, 1.42),
    ("conv7", 256, 256, 640, 4.45, 3.65, 1.42, 1.16),
    ("conv9", 512, 512, 512, 3.32, 3.16, 1.06, 1.01),
    ("conv11", 512, 512, 512, 3.32, 3.16, 1.06, 1.01),
    ("conv13", 512, 512, 512, 3.32, 3.16, 1.06, 1.01),
];

fn vgg_layer_bits() -> Verdict {
    let mut misses = Vec::new();
    for (name, p, q, k, frac_k, frac_kc, beta_k, beta_kc) in VGG_ROWS {
        let n = p * q;
        for (b_c, frac, beta) in [(32, frac_k, beta_k), (6, frac_kc, beta_kc)] {
            let c = layer_cost(n, 3, k, b_c).expect("valid row");
            // two decimals: the printed value differs from the exact one by less than 0.01
            if (c.beta - beta).abs() >= 0.01 {
                misses.push(format!("{name} b_c={b_c} bits {:.4} vs {beta}", c.beta));
            }
            let pct = c.size_fraction * 100.0;
            if (pct - frac).abs() > 0.01 {
                misses.push(format!("{name} b_c={b_c} size {pct:.4}% vs {frac}%"));
            }
        }
    }
    if misses.is_empty() {
        Verdict::new(true, "28 cells within tolerance")
    } else {
        Verdict::new(
            false,
            format!("{} of 28 cells off: {}", misses.len(), misses.join("; ")),
        )
    }
}

fn compression_limits() -> Verdict {
    let kq3 = kq_limit(3).unwrap();
    let conv = conventional_cost(10_000_000, 2, 32).unwrap();
    Verdict::new(
        kq3 == 288.0 && (conv - 32.0).abs() < 1e-3,
        format!("kernel limit {kq3}, per-parameter ratio at 1e7 params {conv:.6}"),
    )
}

fn binary_kernel_count() -> Verdict {
    let k = theoretical_codebook(2, 3).unwrap();
    Verdict::new(k == 512, format!("2^(3x3) = {k}"))
}

// ---------------------------------------------------------------------------

/// Points drawn from one of three families: iid Gaussian, Gaussian blobs, or
/// coarsely rounded values with many duplicates and ties.
fn clustering_instance(r: &mut ChaCha8Rng, n: usize, dim: usize) -> PointSet {
    let coords: Vec<f64> = match r.random_range(0..3) {
        0 => (0..n * dim).map(|_| r.sample(StandardNormal)).collect(),
        1 => {
            let blobs = r.random_range(2..40);
            let centers: Vec<f64> = (0..blobs * dim)
                .map(|_| r.random_range(-10.0..10.0))
                .collect();
            let mut v = Vec::with_capacity(n * dim);
            for _ in 0..n {
                let b = r.random_range(0..blobs);
                for d in 0..dim {
                    v.push(centers[b * dim + d] + 0.5 * r.sample::<f64, _>(StandardNormal));
                }
            }
            v
        }
        _ => (0..n * dim)
            .map(|_| (r.sample::<f64, _>(StandardNormal) * 4.0).round())
            .collect(),
    };
    if r.random_bool(0.3) {
        let weights = (0..n).map(|_| r.random_range(1..20) as f64).collect();
        PointSet::with_weights(dim, coords, weights).unwrap()
    } else {
        PointSet::new(dim, coords).unwrap()
    }
}

fn yinyang_matches_lloyd() -> Verdict {
    let mut r = rng(0xC1);
    let opts = KMeansOptions {
        workers: workers(),
        ..KMeansOptions::default()
    };
    let mut sizes: Vec<(usize, usize)> = vec![(20_000, 1024), (20_000, 256), (5_000, 1024)];
    while sizes.len() < 50 {
        let n = (10f64.powf(r.random_range(2.0..4.3)) as usize).min(20_000);
        let k_max = (n / 4).clamp(2, 1024);
        let k = (2f64.powf(r.random_range(1.0..(k_max as f64).log2())) as usize).clamp(2, k_max);
        sizes.push((n, k));
    }
    let (mut failures, mut evals_l, mut evals_y, mut done) = (Vec::new(), 0u64, 0u64, 0);
    for (i, &(n, k)) in sizes.iter().enumerate() {
        let ps = clustering_instance(&mut r, n, 9);
        let k = k.min(ps.distinct_weighted());
        let init = kmeans_pp_init(&ps, k, i as u64).unwrap();
        let a = lloyd(&ps, &init, &opts).unwrap();
        let b = yinyang(&ps, &init, &opts).unwrap();
        evals_l += a.distance_evals;
        evals_y += b.distance_evals;
        done += 1;
        if a.assignment != b.assignment {
            failures.push(format!("#{i} (n={n}, k={k}) assignments differ"));
        }
        if (a.inertia - b.inertia).abs() > 1e-10 * a.inertia.abs().max(f64::MIN_POSITIVE) {
            failures.push(format!("#{i} inertia {} vs {}", a.inertia, b.inertia));
        }
        if let Some(w) = a
            .history
            .windows(2)
            .find(|w| w[1] > w[0] + 1e-12 * w[0].abs())
        {
            failures.push(format!("#{i} Lloyd inertia rose {} -> {}", w[0], w[1]));
        }
    }
    let summary = format!(
        "{done} instances, yinyang used {:.1}% of Lloyd's distance evaluations",
        100.0 * evals_y as f64 / evals_l as f64
    );
    if failures.is_empty() {
        Verdict::new(true, summary)
    } else {
        Verdict::new(false, format!("{summary}; {}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------

/// Adds every kernel's gradient into its entry one scalar at a time, then
/// divides each entry's sums by the number of kernels that contributed.
fn scatter_gather_update(cb: &KernelCodebook, grads: &[f32], lr: f64) -> Vec<f64> {
    let d = cb.omega_sq();
    let mut out = Vec::with_capacity(cb.k() * d);
    for i in 0..cb.k() {
        let members: Vec<usize> = (0..cb.n())
            .filter(|&j| cb.assignment()[j] as usize == i)
            .collect();
        for s in 0..d {
            let mut g = 0.0f64;
            for &j in &members {
                g += f64::from(grads[j * d + s]);
            }
            if !members.is_empty() {
                g /= members.len() as f64;
            }
            out.push(f64::from(cb.entry(i)[s]) - lr * g);
        }
    }
    out
}

fn codebook_update_oracle() -> Verdict {
    let mut r = rng(0xE2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=500);
        let k = r.random_range(1..=32);
        let entries: Vec<f32> = (0..k * 9).map(|_| r.sample(StandardNormal)).collect();
        let assignment: Vec<u32> = (0..n).map(|_| r.random_range(0..k as u32)).collect();
        let cb = KernelCodebook::new(9, entries, assignment).unwrap();
        let grads: Vec<f32> = (0..n * 9).map(|_| r.sample(StandardNormal)).collect();
        let lr = 10f64.powf(r.random_range(-4.0..0.0));
        let got =
            apply_codebook_update(&cb, &GradientBatch::new("l", 9, grads.clone(), lr).unwrap())
                .unwrap();
        let want = scatter_gather_update(&cb, &grads, lr);
        for (&g, &w) in got.entries().iter().zip(&want) {
            // both sides are rounded to the stored f32 precision
            worst = worst.max((f64::from(g) - f64::from(w as f32)).abs());
        }
    }
    Verdict::new(
        worst <= 1e-12,
        format!("100 instances, max deviation {worst:e}"),
    )
}

// ---------------------------------------------------------------------------

fn distinct_kernels(t: &WeightTensor) -> usize {
    let km = to_kernel_matrix(t).unwrap();
    (0..km.n())
        .map(|j| km.column(j).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Accuracy `distinct kernels / n` of one layer, counting evaluator calls.
fn linear_eval(
    layer: usize,
    n: usize,
    calls: &mut usize,
) -> impl FnMut(&ModelArchive) -> kq_core::Result<f64> + '_ {
    move |m: &ModelArchive| {
        *calls += 1;
        Ok(distinct_kernels(&m.layers()[layer]) as f64 / n as f64)
    }
}

fn gaussian_model(p: usize, q: usize, seed: u64) -> ModelArchive {
    ModelArchive::new(vec![common::conv("conv", 3, p, q, seed)]).unwrap()
}

fn binary_search_thresholds() -> Verdict {
    let mut failures = Vec::new();
    let opts = QuantizeOptions::default();

    // hand trace: N_init 64, threshold 51
    let model = gaussian_model(8, 16, 51);
    let n = 128;
    let cfg = SearchConfig {
        alpha: 0.5,
        r: (64.0 - 50.5) / (128.0 - 64.0),
        max_iter: 8,
    };
    let mut calls = 0;
    let (cb, state) =
        binary_search_codebook(&model, 0, &cfg, &mut linear_eval(0, n, &mut calls), &opts).unwrap();
    let trace: Vec<usize> = std::iter::once(state.n_init)
        .chain(state.probes.iter().map(|p| p.size))
        .collect();
    if trace != [64, 32, 48, 56, 52, 50, 51] || cb.k() != 51 {
        failures.push(format!("hand trace {trace:?} -> {}", cb.k()));
    }

    let mut r = rng(0xB5);
    let mut max_calls_over = 0i64;
    for trial in 0..100 {
        let (p, q) = (r.random_range(2..=16), r.random_range(8..=64));
        let n = p * q;
        let alpha = r.random_range(0.2..0.9);
        let max_iter = r.random_range(1..=10);
        let model = gaussian_model(p, q, 1000 + trial);
        let cfg0 = SearchConfig {
            alpha,
            r: 0.0,
            max_iter,
        };
        let n_init = cfg0.initial_size(n);
        if n_init <= 2 || n_init >= n {
            continue;
        }
        let threshold = r.random_range(2..=n_init);
        // accuracy s/n beats target (threshold − ½)/n exactly when s ≥ threshold
        let target = (threshold as f64 - 0.5) / n as f64;
        let (a_ori, a_base) = (1.0, n_init as f64 / n as f64);
        let cfg = SearchConfig {
            r: (a_base - target) / (a_ori - a_base),
            ..cfg0
        };
        let mut calls = 0;
        let (cb, state) =
            binary_search_codebook(&model, 0, &cfg, &mut linear_eval(0, n, &mut calls), &opts)
                .unwrap();
        let bound = n_init.div_ceil(1 << max_iter);
        if cb.k().abs_diff(threshold) > bound {
            failures.push(format!(
                "trial {trial}: n={n} N_init={n_init} max_iter={max_iter} threshold {threshold} got {}",
                cb.k()
            ));
        }
        max_calls_over = max_calls_over.max(calls as i64 - (max_iter as i64 + 2));
        if calls > max_iter + 2 || state.probes.len() > max_iter {
            failures.push(format!(
                "trial {trial}: {calls} evaluations for max_iter {max_iter}"
            ));
        }
    }
    if failures.is_empty() {
        Verdict::new(
            true,
            "hand trace returns 51; 100 thresholds within bound; evaluations <= max_iter + 2",
        )
    } else {
        Verdict::new(false, failures.join("; "))
    }
}

// ---------------------------------------------------------------------------

fn kernels_beat_scalar_bits() -> Verdict {
    let opts = QuantizeOptions {
        kmeans: KMeansOptions {
            workers: workers(),
            ..KMeansOptions::default()
        },
        ..QuantizeOptions::default()
    };
    let (mut one_bit_wins, mut two_bit_wins, mut both) = (0, 0, 0);
    let (mut ratio1, mut ratio2) = (0.0, 0.0);
    for trial in 0..100u64 {
        // 64 × 128 = 8192 kernels
        let t = common::conv("conv", 3, 64, 128, 0xF3 + trial);
        let o = QuantizeOptions {
            seed: trial,
            ..opts
        };
        let k512 = kernel_error(&t, 0, 512, 1, &o).unwrap();
        let b1 = scalar_error(&t, 0, 1, 1, &o).unwrap();
        let k2048 = kernel_error(&t, 0, 2048, 1, &o).unwrap();
        let b2 = scalar_error(&t, 0, 2, 1, &o).unwrap();
        ratio1 += k512 / b1;
        ratio2 += k2048 / b2;
        let (w1, w2) = (k512 < b1, k2048 < b2);
        one_bit_wins += usize::from(w1);
        two_bit_wins += usize::from(w2);
        both += usize::from(w1 && w2);
    }
    Verdict::new(
        both >= 95,
        format!(
            "k=512 beats 1-bit in {one_bit_wins}/100 (mean error ratio {:.3}), k=2048 beats 2-bit in {two_bit_wins}/100 (mean ratio {:.3}); both in {both}/100",
            ratio1 / 100.0,
            ratio2 / 100.0
        ),
    )
}

// ---------------------------------------------------------------------------

fn random_layer(r: &mut ChaCha8Rng, name: String) -> QuantizedLayer {
    let (p, q) = (r.random_range(1..=12), r.random_range(1..=12));
    let n = p * q;
    let kernel_cb = |r: &mut ChaCha8Rng| {
        let k = r.random_range(1..=64);
        let entries = (0..k * 9).map(|_| r.sample(StandardNormal)).collect();
        let assignment = (0..n).map(|_| r.random_range(0..k as u32)).collect();
        KernelCodebook::new(9, entries, assignment).unwrap()
    };
    let scalar_cb = |r: &mut ChaCha8Rng, count: usize| {
        let bits = r.random_range(0..=10u8);
        let levels = r.random_range(1..=1usize << bits);
        let mut values: Vec<f32> = (0..levels).map(|_| r.sample(StandardNormal)).collect();
        values.sort_by(f32::total_cmp);
        let indexes = (0..count)
            .map(|_| r.random_range(0..levels as u32))
            .collect();
        ScalarCodebook::new(bits, values, indexes).unwrap()
    };
    let dims = vec![3, 3, p, q];
    match r.random_range(0..4) {
        0 => QuantizedLayer::new(
            name,
            LayerKind::Conv,
            dims,
            LayerPayload::Kernel(kernel_cb(r)),
        )
        .unwrap(),
        1 => {
            let cb = kernel_cb(r);
            let scalar = scalar_cb(r, cb.k() * 9);
            let codebook = cb.with_entries(scalar.dequantize()).unwrap();
            QuantizedLayer::new(
                name,
                LayerKind::Conv,
                dims,
                LayerPayload::KernelScalar { codebook, scalar },
            )
            .unwrap()
        }
        2 => {
            let (rows, cols) = (r.random_range(1..=40), r.random_range(1..=40));
            let sc = scalar_cb(r, rows * cols);
            QuantizedLayer::new(
                name,
                LayerKind::FullyConnected,
                vec![rows, cols],
                LayerPayload::Scalar(sc),
            )
            .unwrap()
        }
        _ => {
            let values = (0..9 * n).map(|_| r.sample(StandardNormal)).collect();
            QuantizedLayer::new(
                name,
                LayerKind::Conv,
                dims,
                LayerPayload::Passthrough(values),
            )
            .unwrap()
        }
    }
}

fn codec_exactness() -> Verdict {
    let mut failures = Vec::new();
    let mut r = rng(0xC0DEC);
    for i in 0..1000 {
        let layer = random_layer(&mut r, format!("layer{i}"));
        let m = CompressedModel::new(vec![layer]);
        let bytes = pack_model(&m).unwrap();
        match unpack_model(&bytes) {
            Ok(back) if back == m && pack_model(&back).unwrap() == bytes => {}
            Ok(_) => failures.push(format!("layer {i} changed in round trip")),
            Err(e) => failures.push(format!("layer {i}: {e}")),
        }
    }
    if pack(&[1, 2, 3, 4], 3).unwrap() != [0xD1, 0x08] {
        failures.push("indexes [1,2,3,4] at 3 bits did not pack to D1 08".into());
    }
    for (name, p, q, k, ..) in VGG_ROWS {
        let n = p * q;
        let mut r = rng(n as u64 + k as u64);
        let entries = (0..k * 9).map(|_| r.sample(StandardNormal)).collect();
        // every entry used at least once, the rest at random
        let assignment = (0..n)
            .map(|j| {
                if j < k {
                    j as u32
                } else {
                    r.random_range(0..k as u32)
                }
            })
            .collect();
        let cb = KernelCodebook::new(9, entries, assignment).unwrap();
        let layer = QuantizedLayer::new(
            name,
            LayerKind::Conv,
            vec![3, 3, p, q],
            LayerPayload::Kernel(cb),
        )
        .unwrap();
        let m = CompressedModel::new(vec![layer]);
        let got = measured_bits(&m).unwrap().total;
        let want = layer_cost(n, 3, k, 32).unwrap().bits_total;
        if got != want {
            failures.push(format!("{name}: measured {got} bits, cost {want}"));
        }
        if unpack_model(&pack_model(&m).unwrap()).unwrap() != m {
            failures.push(format!("{name}: round trip changed the layer"));
        }
    }
    if failures.is_empty() {
        Verdict::new(true, "1000 random layers bit-exact; D1 08 matches; measured bits equal layer cost on 7 fixtures")
    } else {
        Verdict::new(false, failures.join("; "))
    }
}

// ---------------------------------------------------------------------------

fn end_to_end_determinism() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let input = dir.path().join("model.kqt");
    kq_core::tensor::save_archive(&four_layer_model(), &input).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let kqz = dir.path().join(format!("run{run}.kqz"));
        let csv = dir.path().join(format!("run{run}.csv"));
        let out = kq(&[
            "quantize",
            "--input",
            s(&input),
            "--output",
            s(&kqz),
            "--report",
            s(&csv),
            "--seed",
            "42",
            "--workers",
            "0",
        ]);
        if !out.status.success() {
            return Verdict::new(
                false,
                format!("run {run} failed: {}", String::from_utf8_lossy(&out.stderr)),
            );
        }
        outputs.push((fs::read(&kqz).unwrap(), fs::read(&csv).unwrap()));
    }
    let same = outputs[0] == outputs[1];
    Verdict::new(
        same,
        format!(
            "KQZ {} bytes, CSV {} bytes, {}",
            outputs[0].0.len(),
            outputs[0].1.len(),
            if same {
                "identical across runs"
            } else {
                "runs differ"
            }
        ),
    )
}

// ---------------------------------------------------------------------------

fn huffman_bounds() -> Verdict {
    let mut r = rng(0x4F);
    let mut failures = Vec::new();
    for i in 0..100 {
        let symbols = r.random_range(1..=300);
        let skew = r.random_range(0.0..3.0);
        let counts: Vec<u64> = (0..symbols)
            .map(|s| (r.random_range(1.0..1000.0) / (1.0 + s as f64).powf(skew)) as u64)
            .collect();
        if counts.iter().sum::<u64>() == 0 {
            continue;
        }
        let h = IndexHistogram::from_counts(counts);
        let l = huffman_estimate(&h).unwrap();
        if !(l >= h.entropy_bits - 1e-12 && l < h.entropy_bits + 1.0) {
            failures.push(format!(
                "histogram {i}: {l} bits vs entropy {}",
                h.entropy_bits
            ));
        }
    }
    for b in 0..=12u32 {
        let h = IndexHistogram::from_counts(vec![17; 1 << b]);
        let l = huffman_estimate(&h).unwrap();
        if l != f64::from(b) {
            failures.push(format!("uniform over 2^{b}: {l}"));
        }
    }
    if failures.is_empty() {
        Verdict::new(
            true,
            "100 histograms within [H, H+1); uniform 2^b gives b for b = 0..12",
        )
    } else {
        Verdict::new(false, failures.join("; "))
    }
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria = [
        Criterion {
            name: "layer bit accounting matches the VGG table",
            budget: Some(Duration::from_secs(1)),
            run: vgg_layer_bits,
        },
        Criterion {
            name: "compression ratio limits",
            budget: Some(Duration::from_secs(1)),
            run: compression_limits,
        },
        Criterion {
            name: "binary kernels of size 3x3",
            budget: None,
            run: binary_kernel_count,
        },
        Criterion {
            name: "yinyang equals lloyd",
            budget: Some(Duration::from_secs(120)),
            run: yinyang_matches_lloyd,
        },
        Criterion {
            name: "codebook update equals scatter/gather",
            budget: None,
            run: codebook_update_oracle,
        },
        Criterion {
            name: "codebook size search",
            budget: None,
            run: binary_search_thresholds,
        },
        Criterion {
            name: "kernel codebooks beat 1-bit and 2-bit scalar",
            budget: Some(Duration::from_secs(300)),
            run: kernels_beat_scalar_bits,
        },
        Criterion {
            name: "codec exactness",
            budget: None,
            run: codec_exactness,
        },
        Criterion {
            name: "end-to-end determinism",
            budget: None,
            run: end_to_end_determinism,
        },
        Criterion {
            name: "huffman estimate bounds",
            budget: None,
            run: huffman_bounds,
        },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = (c.run)();
        let elapsed = start.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = v.pass && in_time;
        let timing = match c.budget {
            Some(b) if !in_time => format!(
                "{:.2}s, over the {}s budget",
                elapsed.as_secs_f64(),
                b.as_secs()
            ),
            _ => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "{} {}: {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            v.detail
        );
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
