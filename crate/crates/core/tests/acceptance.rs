//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report reads top to
//! bottom. Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dynalign::checkpoint;
use dynalign::config::parse_config;
use dynalign::dataset::{load_dataset, Manifest};
use dynalign::eval::{evaluate, run_protocol, Protocol, ProtocolRun, Variant};
use dynalign::features::{
    band_variance, build_feature_vector, default_bands, differential_entropy, BandSpec, RawWindow,
};
use dynalign::kernel::{cmmd, mmd, KernelConfig, LabeledBatch};
use dynalign::net::{self, BetaRule, LossSettings, ModelParams, NetShape};
use dynalign::schedule::{alpha_at, beta_of, confidence_threshold, ScheduleConfig};
use dynalign::synth::generate_synth_shift;
use dynalign::trainer::train;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, what: &str, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!(
            "[{}] {id} {what}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }

    fn skip(&self, id: &str, what: &str, why: &str) {
        println!("[SKIP] {id} {what}: {why}");
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------
// Brute-force oracles written without reference to the library internals.

fn oracle_k(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (-s / sigma).exp()
}

fn oracle_median_sigma(rows: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let mut s = 0.0;
            for (a, b) in rows[i].iter().zip(&rows[j]) {
                s += (a - b).powi(2);
            }
            d.push(s);
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn oracle_mmd(s: &[Vec<f64>], t: &[Vec<f64>], sigma: f64) -> f64 {
    let (n, m) = (s.len() as f64, t.len() as f64);
    let mut a = 0.0;
    for x in s {
        for y in s {
            a += oracle_k(x, y, sigma);
        }
    }
    let mut b = 0.0;
    for x in t {
        for y in t {
            b += oracle_k(x, y, sigma);
        }
    }
    let mut c = 0.0;
    for x in s {
        for y in t {
            c += oracle_k(x, y, sigma);
        }
    }
    (a / (n * n) + b / (m * m) - 2.0 * c / (n * m)).max(0.0)
}

fn oracle_cmmd(
    s: &[Vec<f64>],
    ys: &[usize],
    t: &[Vec<f64>],
    yt: &[usize],
    sigma: f64,
    classes: usize,
) -> f64 {
    let mut total = 0.0;
    let mut shared = 0;
    for c in 0..classes {
        let sc: Vec<Vec<f64>> = s
            .iter()
            .zip(ys)
            .filter(|(_, &y)| y == c)
            .map(|(x, _)| x.clone())
            .collect();
        let tc: Vec<Vec<f64>> = t
            .iter()
            .zip(yt)
            .filter(|(_, &y)| y == c)
            .map(|(x, _)| x.clone())
            .collect();
        if sc.is_empty() || tc.is_empty() {
            continue;
        }
        shared += 1;
        let (n, m) = (sc.len() as f64, tc.len() as f64);
        let mut v = 0.0;
        for x in &sc {
            for y in &sc {
                v += oracle_k(x, y, sigma) / (n * n);
            }
        }
        for x in &tc {
            for y in &tc {
                v += oracle_k(x, y, sigma) / (m * m);
            }
        }
        for x in &sc {
            for y in &tc {
                v -= 2.0 * oracle_k(x, y, sigma) / (n * m);
            }
        }
        total += v;
    }
    if shared == 0 {
        0.0
    } else {
        (total / shared as f64).max(0.0)
    }
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want.abs()
    }
}

fn criterion_kernel_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_mmd = 0.0f64;
    let mut worst_cmmd = 0.0f64;
    for pair in 0..200 {
        let n = rng.random_range(2..=16);
        let m = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=4);
        let shift: f64 = rng.random_range(0.0..2.0);
        let xs = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let xt = Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal) + shift);
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let yt: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let (rs, rt) = (to_rows(&xs), to_rows(&xt));

        // Alternate between the median heuristic and a fixed bandwidth.
        let (cfg, sigma) = if pair % 2 == 0 {
            let pooled: Vec<Vec<f64>> = rs.iter().chain(&rt).cloned().collect();
            (KernelConfig::median(), oracle_median_sigma(&pooled))
        } else {
            let s = rng.random_range(0.2..5.0);
            (KernelConfig::fixed(s), s)
        };
        let got = mmd(xs.view(), xt.view(), &cfg).unwrap();
        worst_mmd = worst_mmd.max(rel_err(got, oracle_mmd(&rs, &rt, sigma)));

        let src = LabeledBatch::new(xs.view(), &ys).unwrap();
        let tgt = LabeledBatch::new(xt.view(), &yt).unwrap();
        let got = cmmd(src, tgt, &cfg, classes).unwrap();
        worst_cmmd = worst_cmmd.max(rel_err(
            got,
            oracle_cmmd(&rs, &ys, &rt, &yt, sigma, classes),
        ));
    }
    let elapsed = start.elapsed();
    r.line(
        "1",
        worst_mmd <= 1e-10 && worst_cmmd <= 1e-10 && elapsed < Duration::from_secs(5),
        "kernel statistics match brute-force oracles (200 pairs, rel 1e-10, < 5 s)",
        format!("max rel err mmd {worst_mmd:.2e}, cmmd {worst_cmmd:.2e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------

fn grad_check(alpha: f64, beta: f64, use_mmd: bool, use_cmmd: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = NetShape {
        input_dim: 6,
        hidden1: 4,
        hidden2: 4,
        classes: 3,
    };
    let mut params = ModelParams::init(shape, &mut rng);
    params
        .b1
        .iter_mut()
        .for_each(|b| *b = rng.random_range(0.2..0.5));
    params
        .b2
        .iter_mut()
        .for_each(|b| *b = rng.random_range(0.2..0.5));
    let xs = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
    let xt = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0) + 0.5);
    let ys = vec![0, 1, 2, 1, 0];
    let settings = LossSettings {
        alpha,
        beta: BetaRule::Fixed(beta),
        tau: 0.0,
        use_mmd,
        use_cmmd,
        dropout: 0.0,
    };
    let kernel = KernelConfig::fixed(1.5);
    let loss = |p: &ModelParams| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        net::total_loss(xs.view(), &ys, xt.view(), p, &settings, &kernel, &mut r)
            .unwrap()
            .0
            .total
    };
    let mut r0 = ChaCha8Rng::seed_from_u64(0);
    let (_, trace) = net::total_loss(
        xs.view(),
        &ys,
        xt.view(),
        &params,
        &settings,
        &kernel,
        &mut r0,
    )
    .unwrap();
    let grads = net::backward(&trace, &params).unwrap();
    let analytic: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|t| t.values.to_vec())
        .collect();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut idx = 0;
    for t in 0..6 {
        let len = params.tensors()[t].values.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t].values[i] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[t].values[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let g = analytic[idx];
            let denom = g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g - fd).abs() / denom);
            idx += 1;
        }
    }
    worst
}

fn criterion_gradients(r: &mut Report) {
    let start = Instant::now();
    let total = grad_check(1.0, 1.0, true, true);
    let mmd_only = grad_check(1.0, 0.0, true, true);
    let cmmd_only = grad_check(0.0, 1.0, true, true);
    let ce_only = grad_check(0.0, 0.0, false, false);
    let elapsed = start.elapsed();
    let worst = total.max(mmd_only).max(cmmd_only).max(ce_only);
    r.line(
        "2",
        worst <= 1e-4 && elapsed < Duration::from_secs(10),
        "backward matches central differences on 6-4-4 net, C=3, batch 5 (rel 1e-4, < 10 s)",
        format!(
            "total {total:.2e}, alpha=1 beta=0 {mmd_only:.2e}, alpha=0 beta=1 {cmmd_only:.2e}, ce {ce_only:.2e}, {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------------

fn criterion_schedules(r: &mut Report) {
    let cfg = ScheduleConfig::default();
    let taus: Vec<f64> = [5, 20, 50, 90]
        .iter()
        .map(|&e| confidence_threshold(e, &cfg))
        .collect();
    let betas: Vec<f64> = [0.05, 0.12, 0.20]
        .iter()
        .map(|&l| beta_of(l, &cfg))
        .collect();
    let a0 = alpha_at(0, &cfg).unwrap();
    let a_end = alpha_at(cfg.total_epochs - 1, &cfg).unwrap();
    let ok =
        taus == [0.0, 0.5, 0.75, 1.0] && betas == [1.0, 0.5, 0.0] && a0 == 1.0 && a_end == 0.01;
    r.line(
        "3",
        ok,
        "schedule tables exact (tau, beta, alpha endpoints)",
        format!("tau {taus:?}, beta {betas:?}, alpha {a0} -> {a_end}"),
    );
}

// ---------------------------------------------------------------------------

fn noise_window(channels: usize, seconds: usize, fs: f64, seed: u64) -> RawWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = seconds * fs as usize;
    RawWindow::new(
        Array2::from_shape_fn((channels, n), |_| rng.sample(StandardNormal)),
        fs,
    )
    .unwrap()
}

fn criterion_features(r: &mut Report) {
    let w = noise_window(4, 10, 200.0, 11);
    let mut worst = 0.0f64;
    for band in default_bands() {
        for ch in 0..4 {
            let var = band_variance(&w, &band, ch).unwrap();
            let closed = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
            worst = worst.max((differential_entropy(var).unwrap() - closed).abs());
        }
    }
    let full = BandSpec::new("full", 0.5, 100.0);
    let de_full = differential_entropy(band_variance(&w, &full, 0).unwrap()).unwrap();
    let fv = build_feature_vector(&noise_window(62, 1, 200.0, 12), &default_bands()).unwrap();
    let ok = worst <= 1e-12 && (de_full - 1.419).abs() <= 0.05 && fv.values.len() == 310;
    r.line(
        "4",
        ok,
        "differential entropy closed form, full-band value, 62-channel length",
        format!(
            "max dev {worst:.1e}, full-band DE {de_full:.4}, length {}",
            fv.values.len()
        ),
    );
}

// ---------------------------------------------------------------------------

fn criterion_synthetic_gain(r: &mut Report) {
    let start = Instant::now();
    let path = workspace_root().join("configs/synth_gain.toml");
    let base = match parse_config(&path) {
        Ok(c) => c,
        Err(e) => {
            r.line(
                "5",
                false,
                "synthetic adaptation gain",
                format!("config: {e}"),
            );
            return;
        }
    };
    let mut means = Vec::new();
    for variant in [Variant::Exp1, Variant::Exp2, Variant::Exp6] {
        let mut accs = Vec::new();
        for k in 0..5 {
            let mut cfg = base.clone();
            cfg.seed = base.seed + k;
            cfg.synth.seed = base.synth.seed + k;
            cfg.variant = variant;
            let task = generate_synth_shift(&cfg.synth).unwrap();
            let out = train(&task.source, &task.target, &cfg.train_config()).unwrap();
            let labeled = task.target_labels.reveal(&task.target).unwrap();
            accs.push(evaluate(&out.params, &labeled).unwrap().accuracy);
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let elapsed = start.elapsed();
    let (e1, e2, e6) = (means[0], means[1], means[2]);
    let ok = (0.60..=0.75).contains(&e1)
        && e6 - e1 >= 0.05
        && e2 - e1 >= 0.02
        && elapsed < Duration::from_secs(300);
    r.line(
        "5",
        ok,
        "synthetic shift: EXP1 in 60-75%, EXP6 >= EXP1 + 5pp, EXP2 >= EXP1 + 2pp, < 5 min",
        format!(
            "EXP1 {:.1}%, EXP2 {:.1}%, EXP6 {:.1}%, {elapsed:.1?}",
            100.0 * e1,
            100.0 * e2,
            100.0 * e6
        ),
    );
}

// ---------------------------------------------------------------------------

fn criterion_determinism(r: &mut Report) {
    let mut cfg = parse_config(&workspace_root().join("configs/synth_gain.toml")).unwrap();
    cfg.epochs = 5;
    cfg.synth.n_per_class = 60;
    let task = generate_synth_shift(&cfg.synth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = train(&task.source, &task.target, &cfg.train_config()).unwrap();
        let p = dir.path().join(format!("run{i}.ckpt"));
        checkpoint::save(&out.params, &p).unwrap();
        bytes.push(std::fs::read(&p).unwrap());
        hashes.push(checkpoint::digest(&out.params));
    }
    r.line(
        "6",
        bytes[0] == bytes[1],
        "two identical training runs give byte-identical checkpoints",
        format!("sha256 {} / {}", &hashes[0][..16], &hashes[1][..16]),
    );
}

// ---------------------------------------------------------------------------

fn criterion_efficiency(r: &mut Report) {
    let shape = NetShape::new(310, 3);
    let params = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(5));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array2::from_shape_fn((128, 310), |_| rng.sample::<f64, _>(StandardNormal));
    let _ = net::predict(x.view(), &params).unwrap();
    let mut times: Vec<Duration> = (0..21)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(net::predict(x.view(), &params).unwrap());
            t.elapsed()
        })
        .collect();
    times.sort();
    let median = times[times.len() / 2];
    r.line(
        "7a",
        median < Duration::from_millis(20),
        "eval-mode forward of a 128 x 310 batch < 20 ms",
        format!("median {median:.2?} over 21 runs"),
    );

    let formula = 310 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3;
    let count = net::parameter_count(&params);
    r.line(
        "7b",
        count == formula,
        "parameter count for 310-64-64-3 equals 310*64+64 + 64*64+64 + 64*3+3",
        format!("{count} (formula {formula})"),
    );
    println!(
        "[NOTE] 7c the quoted total 24,131 does not equal the layer formula above ({formula}); \
         it matches the count without the two hidden-layer bias vectors ({}). Not asserted.",
        formula - 64 - 64
    );
}

// ---------------------------------------------------------------------------

fn criterion_dataset(r: &mut Report) {
    const VAR: &str = "DYNALIGN_FEATURE_MANIFEST";
    let Some(manifest) = std::env::var_os(VAR) else {
        r.skip(
            "8",
            "single-session protocol on user-supplied DE features",
            &format!("{VAR} not set"),
        );
        return;
    };
    let result = Manifest::read(Path::new(&manifest))
        .and_then(|m| load_dataset(&m))
        .and_then(|ds| {
            let cfg = dynalign::config::RunConfig::default();
            let run = ProtocolRun {
                jobs: std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1),
                config_hash: cfg.hash(),
                ..ProtocolRun::new(Protocol::SingleSession, Variant::Exp6, cfg.train_config())
            };
            run_protocol(&ds, &run)
        });
    match result {
        Ok(summary) => r.line(
            "8",
            true,
            "single-session protocol on user-supplied DE features",
            format!(
                "{} folds, accuracy {}",
                summary.folds.len(),
                summary.headline()
            ),
        ),
        Err(e) => r.line(
            "8",
            false,
            "single-session protocol on user-supplied DE features",
            e.to_string(),
        ),
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to list here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut r = Report { failed: 0 };
    criterion_kernel_oracle(&mut r);
    criterion_gradients(&mut r);
    criterion_schedules(&mut r);
    criterion_features(&mut r);
    criterion_synthetic_gain(&mut r);
    criterion_determinism(&mut r);
    criterion_efficiency(&mut r);
    criterion_dataset(&mut r);
    if r.failed > 0 {
        println!("{} criteria failed", r.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
