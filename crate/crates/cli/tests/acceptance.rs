//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! Criterion failures are reported, and the process exits non-zero on them
//! only when `XIL_ACCEPTANCE_STRICT=1`. Set `XIL_ACCEPTANCE_ONLY=4,7` to run
//! a subset.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xil_core::data::{generate_synthetic_biased, Image, Mask, Sample, SyntheticBiasSpec};
use xil_core::explain::{Method, SaliencyMap};
use xil_core::metrics::{binarize_saliency, bfp, bsr, dice, ffp, threshold, BiasReport, DEFAULT_QUANTILE};
use xil_core::nn::{Activation, Architecture, Classifier, ConvBlock, ParamScope};
use xil_core::orchestrator::{
    run_from_baseline, train_baseline, DataSpec, ExperimentConfig, NoProgress, OracleFeedback, RunEnv, SteeringConfig,
    Strategy,
};
use xil_core::steering::{caipi_counterexamples, rrr_loss, Rrr, RrrWeights, Transform};
use xil_core::trainer::{CrossEntropy, Objective, TrainItem};
use xil_core::MetricError;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(&root().join("configs").join(name)).expect("config file")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(", ")
}

// ---- criterion 1 -----------------------------------------------------------

/// Pixel-loop reference implementations of the metrics.
mod oracle {
    pub fn quantile(values: &[f64], q: f64) -> f64 {
        let mut s = values.to_vec();
        // insertion sort keeps the reference independent of the library path
        for i in 1..s.len() {
            let mut j = i;
            while j > 0 && s[j - 1] > s[j] {
                s.swap(j - 1, j);
                j -= 1;
            }
        }
        let pos = q * (s.len() as f64 - 1.0);
        let i = pos as usize;
        if i + 1 >= s.len() {
            return s[s.len() - 1];
        }
        s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
    }

    pub struct Counts {
        pub above: usize,
        pub fg: usize,
        pub fg_above: usize,
        pub bg: usize,
        pub bg_above: usize,
        pub x_and_y: usize,
        pub y: usize,
        pub mass: f64,
        pub bg_mass: f64,
    }

    pub fn counts(s: &[f64], a: &[u8], t: f64) -> Counts {
        let mut c = Counts { above: 0, fg: 0, fg_above: 0, bg: 0, bg_above: 0, x_and_y: 0, y: 0, mass: 0.0, bg_mass: 0.0 };
        for p in 0..s.len() {
            let hit = s[p] > t;
            c.above += hit as usize;
            c.mass += s[p];
            if a[p] == 1 {
                c.bg += 1;
                c.bg_above += hit as usize;
                c.bg_mass += s[p];
            } else {
                c.fg += 1;
                c.fg_above += hit as usize;
                c.y += 1;
                c.x_and_y += hit as usize;
            }
        }
        c
    }
}

fn criterion_1() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();
    let mut degenerate = 0;
    for case in 0..1000 {
        // coarse levels produce ties; some maps are all zero
        let zero_map = case % 50 == 0;
        let values: Vec<f64> =
            (0..64).map(|_| if zero_map { 0.0 } else { rng.gen_range(0..17) as f64 / 16.0 * rng.gen::<f64>().sqrt() }).collect();
        let fill = match case % 97 {
            0 => 1.0,
            1 => 0.0,
            _ => rng.gen_range(0.1..0.9),
        };
        let a: Vec<u8> = (0..64).map(|_| rng.gen_bool(fill) as u8).collect();
        let map = SaliencyMap::new(8, 8, values.clone(), 0, Method::Gradcam).unwrap();
        let mask = Mask::new(8, 8, a.clone()).unwrap();

        let t_ref = oracle::quantile(&values, DEFAULT_QUANTILE);
        let t = threshold(&map, DEFAULT_QUANTILE);
        let c = oracle::counts(&values, &a, t_ref);
        let bin = binarize_saliency(&map, DEFAULT_QUANTILE);
        let bin_ref: Vec<bool> = values.iter().map(|&v| v > t_ref).collect();
        let mut ok = (t - t_ref).abs() <= 1e-9 && bin.values == bin_ref && bin.count() == c.above;

        let want_ffp = (c.fg > 0).then(|| c.fg_above as f64 / c.fg as f64).ok_or(MetricError::EmptyForeground);
        let want_bfp = (c.bg > 0).then(|| c.bg_above as f64 / c.bg as f64).ok_or(MetricError::EmptyBackground);
        let want_bsr = (c.mass > 0.0).then(|| c.bg_mass / c.mass).ok_or(MetricError::ZeroSaliency);
        let want_dice =
            (c.above + c.y > 0).then(|| 2.0 * c.x_and_y as f64 / (c.above + c.y) as f64).ok_or(MetricError::DegenerateDice);
        let person = mask.inverted();
        for (got, want) in [
            (ffp(&map, &mask, t), want_ffp),
            (bfp(&map, &mask, t), want_bfp),
            (bsr(&map, &mask), want_bsr),
            (dice(&bin, &person), want_dice),
        ] {
            ok &= match (got, want) {
                (Ok(g), Ok(w)) => (g - w).abs() <= 1e-9,
                (Err(g), Err(w)) => g == w,
                _ => false,
            };
            degenerate += want.is_err() as usize;
        }
        if !ok {
            mismatches.push(case);
        }
    }
    let detail = format!("1000 random 8x8 pairs, {} mismatches, {degenerate} degenerate cases checked", mismatches.len());
    (mismatches.is_empty(), detail)
}

// ---- criterion 2 -----------------------------------------------------------

fn toy_model() -> Classifier {
    // 5*(1*9)+5 + 6*(5*1)+6 + 2*6+2 = 100 parameters
    let arch = Architecture {
        input_size: 5,
        in_channels: 1,
        blocks: vec![ConvBlock::new(5, 3, 1, 1), ConvBlock::new(6, 1, 1, 1)],
        activation: Activation::Tanh,
        num_classes: 2,
        attention: false,
    };
    let mut model = Classifier::new(arch, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in model.params_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    model
}

fn criterion_2() -> (bool, String) {
    let model = toy_model();
    let n = model.params().len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Sample> = (0..4)
        .map(|i| {
            let img: Vec<f32> = (0..25).map(|_| rng.gen::<f32>()).collect();
            let mask = Mask::new(5, 5, (0..25).map(|_| rng.gen_bool(0.6) as u8).collect()).unwrap();
            Sample::new(format!("toy{i}"), Image::new(5, 5, 1, img).unwrap(), i % 2, mask).unwrap()
        })
        .collect();
    let items: Vec<TrainItem> = samples.iter().map(|s| TrainItem::with_mask(s, &s.relevance_mask)).collect();
    let w = RrrWeights::new(10.0, 1e-4).unwrap();
    let mut grad = vec![0.0; n];
    Rrr::new(w).evaluate(&model, &items, ParamScope::All, &mut grad).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..50 {
        let i = rng.gen_range(0..n);
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let fd = (rrr_loss(&plus, &items, w).unwrap().total() - rrr_loss(&minus, &items, w).unwrap().total()) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(1e-6);
        worst = worst.max(rel);
        failures += (rel > 1e-3) as usize;
    }
    let zero = rrr_loss(&model, &items, RrrWeights::new(0.0, 0.0).unwrap()).unwrap().total();
    let ce = CrossEntropy.evaluate(&model, &items, ParamScope::All, &mut vec![0.0; n]).unwrap().total();
    let ce_gap = (zero - ce).abs();
    let pass = n == 100 && failures == 0 && ce_gap <= 1e-9;
    (pass, format!("{n} params, 50 coords, max rel err {worst:.2e}, |loss(0,0) - CE| = {ce_gap:.1e}"))
}

// ---- criterion 3 -----------------------------------------------------------

fn criterion_3() -> (bool, String) {
    let data = generate_synthetic_biased(&SyntheticBiasSpec::new(32, 60, 1.0, 5)).unwrap();
    let mut total = 0;
    let (mut identical, mut labels, mut order) = (0, 0, 0);
    for (n, s) in data.samples().iter().take(100).enumerate() {
        let ces = caipi_counterexamples(s, &s.relevance_mask, 5, n % 3, 9).unwrap();
        for (i, ce) in ces.iter().enumerate() {
            total += 1;
            let same = (0..s.image.channels()).all(|c| {
                (0..32).all(|y| {
                    (0..32).all(|x| {
                        s.relevance_mask.get(y, x) || ce.sample.image.get(c, y, x).to_bits() == s.image.get(c, y, x).to_bits()
                    })
                })
            });
            identical += same as usize;
            labels += (ce.sample.label == s.label) as usize;
            order += (ce.transform == Transform::SEQUENCE[i % 5]) as usize;
        }
    }
    let pass = total == 500 && identical == total && labels == total && order == total;
    (pass, format!("{total} counterexamples: relevant region identical {identical}, label kept {labels}, transform order {order}"))
}

// ---- criteria 4, 5, 7 -------------------------------------------------------

fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.steering.seed = seed;
    if let DataSpec::Synthetic(s) = &mut c.data {
        s.seed = seed;
    }
    c
}

/// Runs every variant from one shared baseline; returns (baseline, finals).
fn run_variants(cfg: &ExperimentConfig, variants: &[SteeringConfig]) -> (BiasReport, Vec<BiasReport>) {
    let data = cfg.data.load().unwrap();
    let (baseline, _) = train_baseline(&cfg.steering, &data).unwrap();
    let mut finals = Vec::new();
    let mut base_report = None;
    for v in variants {
        let mut oracle = OracleFeedback;
        let mut env = RunEnv { run_dir: None, data_spec: None, feedback: &mut oracle, progress: &NoProgress };
        let rec = run_from_baseline(v, &data, baseline.clone(), 0.0, &mut env).unwrap();
        base_report = Some(rec.baseline.clone());
        finals.push(rec.final_report);
    }
    (base_report.unwrap(), finals)
}

struct BiasBreak {
    baseline: Vec<BiasReport>,
    caipi: Vec<BiasReport>,
    hybrid: Vec<BiasReport>,
    rrr: Vec<BiasReport>,
}

fn variants(cfg: &SteeringConfig) -> Vec<SteeringConfig> {
    vec![
        SteeringConfig { strategy: Strategy::Caipi, k: 5, ..cfg.clone() },
        SteeringConfig { strategy: Strategy::Hybrid, k: 1, ..cfg.clone() },
        SteeringConfig { strategy: Strategy::Rrr, ..cfg.clone() },
    ]
}

fn bias_break_runs() -> BiasBreak {
    let base = config("bias_break.toml");
    let mut out = BiasBreak { baseline: vec![], caipi: vec![], hybrid: vec![], rrr: vec![] };
    for seed in SEEDS {
        let cfg = seeded(&base, seed);
        let (b, f) = run_variants(&cfg, &variants(&cfg.steering));
        println!(
            "  seed {seed}: baseline FFP {:.3} BSR {:.3} DICE {:.3} acc {:.1}% | caipi FFP {:.3} BSR {:.3} | hybrid DICE {:.3} | rrr BSR {:.3}",
            b.ffp, b.bsr, b.dice, b.accuracy, f[0].ffp, f[0].bsr, f[1].dice, f[2].bsr
        );
        out.baseline.push(b);
        out.caipi.push(f[0].clone());
        out.hybrid.push(f[1].clone());
        out.rrr.push(f[2].clone());
    }
    out
}

fn deltas(before: &[BiasReport], after: &[BiasReport], f: impl Fn(&BiasReport) -> f64) -> Vec<f64> {
    before.iter().zip(after).map(|(b, a)| f(a) - f(b)).collect()
}

fn criterion_4(r: &BiasBreak) -> Vec<(&'static str, bool, String)> {
    let d_ffp = deltas(&r.baseline, &r.caipi, |x| x.ffp);
    let d_bsr = deltas(&r.baseline, &r.caipi, |x| x.bsr);
    let d_dice = deltas(&r.baseline, &r.hybrid, |x| x.dice);
    let d_rrr = deltas(&r.baseline, &r.rrr, |x| x.bsr);
    let (m_ffp, m_bsr, m_dice, m_rrr) = (median(d_ffp.clone()), median(d_bsr.clone()), median(d_dice.clone()), median(d_rrr.clone()));
    vec![
        (
            "4a",
            m_ffp >= 0.05 && m_bsr <= -0.05,
            format!(
                "caipi/high-confidence/k=5: median dFFP {m_ffp:+.3} (>= +0.05) [{}], median dBSR {m_bsr:+.3} (<= -0.05) [{}]",
                fmt_list(&d_ffp),
                fmt_list(&d_bsr)
            ),
        ),
        ("4b", m_dice > 0.0, format!("hybrid/high-confidence/k=1: median dDICE {m_dice:+.3} (> 0) [{}]", fmt_list(&d_dice))),
        ("4c", m_rrr < 0.0, format!("rrr/high-confidence: median dBSR {m_rrr:+.3} (< 0) [{}]", fmt_list(&d_rrr))),
    ]
}

/// Penalty-weight sweep for the input-gradient strategy; informational.
fn lambda_sweep() {
    let base = config("bias_break.toml");
    for l1 in [1.0, 30.0] {
        let mut d = Vec::new();
        for seed in SEEDS {
            let cfg = seeded(&base, seed);
            let mut v = SteeringConfig { strategy: Strategy::Rrr, ..cfg.steering.clone() };
            v.rrr_weights.lambda1 = l1;
            let (b, f) = run_variants(&cfg, &[v]);
            d.push(f[0].bsr - b.bsr);
        }
        println!("  [info] rrr lambda1 = {l1}: median dBSR {:+.3} [{}]", median(d.clone()), fmt_list(&d));
    }
}

fn criterion_5() -> (bool, String) {
    let base = config("fairness.toml");
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = seeded(&base, seed);
        let (b, f) = run_variants(&cfg, &[SteeringConfig { strategy: Strategy::Caipi, k: 5, ..cfg.steering.clone() }]);
        println!(
            "  seed {seed}: shares {:.1}/{:.1} ({} errors) -> {:.1}/{:.1} ({} errors)",
            100.0 * b.miscl.shares[0],
            100.0 * b.miscl.shares[1],
            b.miscl.errors,
            100.0 * f[0].miscl.shares[0],
            100.0 * f[0].miscl.shares[1],
            f[0].miscl.errors
        );
        before.push(b.miscl.gap());
        after.push(f[0].miscl.gap());
    }
    let shrink: Vec<f64> = before.iter().zip(&after).map(|(b, a)| b - a).collect();
    let (m_before, m_shrink) = (median(before.clone()), median(shrink.clone()));
    let pass = m_before >= 0.10 && m_shrink > 0.0;
    let detail = format!(
        "caipi/high-confidence/k=5 with class-asymmetric cue: median baseline gap {:.1} pts (>= 10), median reduction {:.1} pts (> 0) [{}]",
        100.0 * m_before,
        100.0 * m_shrink,
        shrink.iter().map(|s| format!("{:+.1}", 100.0 * s)).collect::<Vec<_>>().join(", ")
    );
    (pass, detail)
}

fn criterion_7(first: &BiasReport) -> (bool, String) {
    let cfg = seeded(&config("bias_break.toml"), SEEDS[0]);
    let (_, f) = run_variants(&cfg, &[SteeringConfig { strategy: Strategy::Caipi, k: 5, ..cfg.steering.clone() }]);
    let a = serde_json::to_string(first).unwrap();
    let b = serde_json::to_string(&f[0]).unwrap();
    let same = a == b && *first == f[0];
    (same, format!("caipi/high-confidence/k=5 seed {} rerun: final report {}", SEEDS[0], if same { "identical" } else { "differs" }))
}

// ---- criterion 6 -----------------------------------------------------------

fn criterion_6() -> (bool, String) {
    let out = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_xil"))
        .args(["grid", "--smoke", "--config"])
        .arg(root().join("configs/bias_break.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .expect("run xil");
    let secs = t.elapsed().as_secs_f64();
    if !status.status.success() {
        return (false, format!("xil grid --smoke failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let mut rdr = csv::Reader::from_path(out.path().join("table.csv")).unwrap();
    let width = rdr.headers().unwrap().len();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let count = |s: &str| rows.iter().filter(|r| &r[0] == s).count();
    let populated = rows.iter().all(|r| r.len() == width && r.iter().all(|f| !f.is_empty()));
    let shape = (count("baseline"), count("caipi"), count("rrr"), count("hybrid"));
    let pass = rows.len() == 23 && shape == (1, 6, 4, 12) && populated && secs < 20.0 * 60.0;
    (
        pass,
        format!(
            "xil grid --smoke: {} rows (baseline/caipi/rrr/hybrid = {}/{}/{}/{}), all fields populated: {populated}, {secs:.0}s (< 1200s)",
            rows.len(),
            shape.0,
            shape.1,
            shape.2,
            shape.3
        ),
    )
}

fn timed(results: &mut Vec<Outcome>, id: &'static str, f: &mut dyn FnMut() -> (bool, String)) {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome { id, pass, detail, seconds: t.elapsed().as_secs_f64() };
    report(&o);
    results.push(o);
}

fn report(o: &Outcome) {
    println!("[{}] criterion {}: {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail, o.seconds);
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("XIL_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |c: &str| only.as_ref().map_or(true, |o| o.iter().any(|x| x == c));
    let mut results: Vec<Outcome> = Vec::new();
    println!("acceptance suite");
    if wanted("1") {
        timed(&mut results, "1", &mut criterion_1);
    }
    if wanted("2") {
        timed(&mut results, "2", &mut criterion_2);
    }
    if wanted("3") {
        timed(&mut results, "3", &mut criterion_3);
    }
    let mut first_caipi = None;
    if wanted("4") || wanted("7") {
        let t = Instant::now();
        let runs = bias_break_runs();
        let secs = t.elapsed().as_secs_f64();
        first_caipi = Some(runs.caipi[0].clone());
        if wanted("4") {
            for (id, pass, detail) in criterion_4(&runs) {
                let o = Outcome { id, pass, detail, seconds: secs };
                report(&o);
                results.push(o);
            }
            lambda_sweep();
        }
    }
    if wanted("5") {
        timed(&mut results, "5", &mut criterion_5);
    }
    if wanted("6") {
        timed(&mut results, "6", &mut criterion_6);
    }
    if let (true, Some(first)) = (wanted("7"), first_caipi) {
        timed(&mut results, "7", &mut || criterion_7(&first));
    }
    let passed = results.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} passed", results.len());
    let strict = std::env::var("XIL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
