//! Acceptance suite. Prints one line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use dacq_cli::{cmd_fit, RunConfig};
use dacq_core::awq::{alpha_search, channel_stats, scales_for_alpha};
use dacq_core::distfit::Family;
use dacq_core::evalx::{layer_error_profile, Layer, ProfileConfig, Protocol};
use dacq_core::grids::{logistic_levels, uniform_levels, GroupStats, QuantGrid};
use dacq_core::quantizer::{
    assign_nearest, companding_cell_centers, gamma_grid, nearest_level, quantize_group, quantize_tensor,
    quantize_tensor_scaled, ActivationBlock, GroupView, Mode, QuantConfig,
};
use dacq_core::synth;
use dacq_core::tensorio::{
    decode_quantized, decode_tensor, encode_quantized, encode_tensor, load_tensor, pack_indices, save_tensor,
    unpack_indices,
};
use dacq_core::{GridKind, WeightTensor};
use rand::Rng;

struct Outcome {
    id: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn line(o: &Outcome) -> String {
    let status = match o.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "NOTED",
    };
    format!("{} {status}: {}", o.id, o.detail)
}

// ---------------------------------------------------------------------------

fn c1_classification() -> Outcome {
    const SEEDS: u64 = 20;
    let mut correct = [0usize; 3];
    let mut slowest = 0.0f64;
    for (fi, family) in Family::ALL.iter().enumerate() {
        for seed in 0..SEEDS {
            let input = tempfile::tempdir().unwrap();
            let out = tempfile::tempdir().unwrap();
            let name = format!("{family}_{seed}");
            let t = synth::family_tensor(&name, *family, 1000, 1000, 1.0, 1000 * fi as u64 + seed).unwrap();
            save_tensor(&t, input.path().join(format!("{name}.dacqt"))).unwrap();
            let cfg = RunConfig {
                input: input.path().to_path_buf(),
                out: out.path().to_path_buf(),
                seed,
                ..RunConfig::default()
            };
            let start = Instant::now();
            let summary = cmd_fit(&cfg).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            if summary.best[0].1 == *family {
                correct[fi] += 1;
            }
        }
    }
    let need = (0.95 * SEEDS as f64).ceil() as usize;
    let pass = correct.iter().all(|&c| c >= need) && slowest < 30.0;
    Outcome {
        id: "C1",
        pass: Some(pass),
        detail: format!(
            "fit classification at n=1e6: normal {}/{SEEDS}, laplace {}/{SEEDS}, logistic {}/{SEEDS} (need {need}); \
             slowest tensor {slowest:.2} s (limit 30 s)",
            correct[0], correct[1], correct[2]
        ),
    }
}

fn grid_mse(w: &[f64], grid: &QuantGrid) -> f64 {
    let idx = assign_nearest(w, grid);
    w.iter().zip(idx).map(|(x, i)| (x - grid.levels[usize::from(i)]).powi(2)).sum::<f64>() / w.len() as f64
}

fn c2_mse_dominance() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut ratio_sum = 0.0;
    for seed in 0..100u64 {
        let w: Vec<f64> =
            synth::family_sample(Family::Logistic, 10_000, 5000 + seed).iter().map(|v| 0.02 * v).collect();
        let stats = GroupStats::from_values(&w).unwrap();
        let l = grid_mse(&w, &logistic_levels(&stats, 16).unwrap());
        let u = grid_mse(&w, &uniform_levels(&stats, 16).unwrap());
        if l < u {
            wins += 1;
        }
        ratio_sum += l / u;
    }
    let secs = start.elapsed().as_secs_f64();
    let ratio = ratio_sum / 100.0;
    Outcome {
        id: "C2",
        pass: Some(wins >= 95 && ratio < 0.9 && secs < 10.0),
        detail: format!(
            "logistic vs uniform grid MSE, J=16, n=1e4: logistic lower in {wins}/100 groups (need 95), \
             mean ratio {ratio:.4} (need < 0.9), {secs:.2} s"
        ),
    }
}

fn check_dominance(searches: &[dacq_core::quantizer::GammaSearchResult]) -> usize {
    searches
        .iter()
        .filter(|s| {
            let best = s.best_error();
            !(best <= s.error_at(0.0).unwrap() && best <= s.error_at(1.0).unwrap())
        })
        .count()
}

fn c3_endpoint_dominance(c5_fixed: &[dacq_core::quantizer::QuantOutcome]) -> Outcome {
    let mut groups = 0;
    let mut violations = 0;
    for o in c5_fixed {
        groups += o.searches.len();
        violations += check_dominance(&o.searches);
    }
    let mut rng = synth::rng(77);
    for case in 0..2000u64 {
        let n = rng.random_range(2..=256usize);
        let family = Family::ALL[(case % 3) as usize];
        let w: Vec<f64> = (0..n).map(|_| 0.05 * synth::draw(family, &mut rng)).collect();
        let tokens = rng.random_range(1..=16usize);
        let x: Vec<f64> = (0..tokens * n).map(|_| synth::draw(Family::Normal, &mut rng)).collect();
        let x = ActivationBlock::new(tokens, n, x).unwrap();
        let view = GroupView { row: 0, col_start: 0, values: &w, activations: Some(&x) };
        let bits = [2usize, 3, 4][case as usize % 3];
        let (s, _, _) = quantize_group(&view, 1 << bits, &gamma_grid(), GridKind::Hybrid).unwrap();
        groups += 1;
        violations += check_dominance(std::slice::from_ref(&s));
    }
    Outcome {
        id: "C3",
        pass: Some(violations == 0),
        detail: format!("E(gamma*) <= min(E(0), E(1)) exactly: {violations} violations in {groups} groups"),
    }
}

fn c4_alpha_search() -> Outcome {
    let mut positive = 0;
    let mut worse_than_zero = 0;
    let cfg = QuantConfig { bits: 4, group_size: 128, mode: Mode::Uniform };
    for seed in 0..20u64 {
        let t = synth::family_tensor("w", Family::Logistic, 32, 256, 0.02, 9000 + seed).unwrap();
        let salient = (seed as usize * 37) % 256;
        let cal = synth::gaussian_calibration("w", 32, 256, &[salient], 100.0, 9100 + seed).unwrap();
        let res = alpha_search(&t, &cal, &channel_stats(&cal).unwrap(), &cfg).unwrap();
        if res.alpha_star > 0.0 {
            positive += 1;
        }
        if res.best_loss() > res.losses[0].1 {
            worse_than_zero += 1;
        }
    }
    Outcome {
        id: "C4",
        pass: Some(worse_than_zero == 0 && positive >= 18),
        detail: format!(
            "alpha search, one channel x100: alpha* > 0 in {positive}/20 seeds (need 18); \
             L(alpha*) > L(0) on {worse_than_zero} tensors (need 0)"
        ),
    }
}

struct C5 {
    outcome: Outcome,
    fixed: Vec<dacq_core::quantizer::QuantOutcome>,
    report: Vec<String>,
}

fn c5_layer_profile() -> C5 {
    let start = Instant::now();
    let layers: Vec<Layer> = (0..4u64)
        .map(|i| {
            let name = format!("layer{i}");
            Layer {
                weights: synth::logistic_mixture_tensor(&name, 512, 512, 0.02, 300 + i).unwrap(),
                calibration: Some(synth::gaussian_calibration(&name, 64, 512, &[], 1.0, 400 + i).unwrap()),
            }
        })
        .collect();
    let cfg = ProfileConfig { bits: 4, group_size: 128, alpha_search: true };
    let rows = layer_error_profile(&layers, &Mode::ALL, &cfg).unwrap();

    let mut dominated = 0;
    let mut report = Vec::new();
    let mut fixed = Vec::new();
    for layer in &layers {
        let name = &layer.weights.name;
        let get = |m: Mode, p: Protocol| {
            rows.iter().find(|r| &r.tensor_name == name && r.mode == m && r.protocol == p).unwrap()
        };
        let hf = get(Mode::Hybrid, Protocol::FixedAlpha);
        let uf = get(Mode::Uniform, Protocol::FixedAlpha);
        if hf.activation_error.unwrap() <= uf.activation_error.unwrap() {
            dominated += 1;
        }
        let hs = get(Mode::Hybrid, Protocol::Searched);
        let us = get(Mode::Uniform, Protocol::Searched);
        let ls = get(Mode::Logistic, Protocol::Searched);
        report.push(format!(
            "    {name}: fixed alpha={:.2} act_err hybrid={:.4e} uniform={:.4e} | searched alpha h/u/l={:.2}/{:.2}/{:.2} \
             output_err hybrid={:.4e} uniform={:.4e} logistic={:.4e} | mse hybrid={:.4e} uniform={:.4e} logistic={:.4e}",
            hf.alpha_star,
            hf.activation_error.unwrap(),
            uf.activation_error.unwrap(),
            hs.alpha_star,
            us.alpha_star,
            ls.alpha_star,
            hs.output_error.unwrap(),
            us.output_error.unwrap(),
            ls.output_error.unwrap(),
            hs.mse,
            us.mse,
            ls.mse,
        ));

        let cal = layer.calibration.as_ref().unwrap();
        let scales = scales_for_alpha(&channel_stats(cal).unwrap(), hf.alpha_star);
        let q = QuantConfig { bits: 4, group_size: 128, mode: Mode::Hybrid };
        let out = quantize_tensor_scaled(&layer.weights, Some(cal), &q, &scales).unwrap();
        assert_eq!(out.total_error(), hf.activation_error.unwrap());
        fixed.push(out);
    }
    let secs = start.elapsed().as_secs_f64();
    C5 {
        outcome: Outcome {
            id: "C5",
            pass: Some(dominated == layers.len()),
            detail: format!(
                "4x 512x512 logistic-mixture layers, g=128, b=4: hybrid <= uniform activation error at fixed alpha \
                 on {dominated}/{} tensors ({secs:.1} s)",
                layers.len()
            ),
        },
        fixed,
        report,
    }
}

fn linear_scan(w: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (j, &l) in levels.iter().enumerate() {
        if (w - l).abs() < (w - levels[best]).abs() {
            best = j;
        }
    }
    best
}

fn c6_oracles() -> Outcome {
    let mut rng = synth::rng(606);
    let mut worst = 0.0f64;
    let cases = 10_000;
    for _ in 0..cases {
        let mu = rng.random_range(-1.0..1.0);
        let sigma = 10f64.powf(rng.random_range(-4.0..0.0));
        let j = [2usize, 4, 8, 16, 32, 256][rng.random_range(0..6)];
        let stats = GroupStats { mu, sigma, w_min: mu - 10.0 * sigma, w_max: mu + 10.0 * sigma, n: j };
        let levels = logistic_levels(&stats, j).unwrap().levels;
        let centers = companding_cell_centers(mu, sigma, j);
        for (a, b) in levels.iter().zip(&centers) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut mismatches = 0;
    let weights = 100_000;
    let mut done = 0;
    while done < weights {
        let j = [2usize, 4, 8, 16, 256][rng.random_range(0..5)];
        let mut levels: Vec<f64> = (0..j).map(|_| rng.random_range(-1.0..1.0)).collect();
        if rng.random_bool(0.2) {
            let k = rng.random_range(0..j);
            levels[(k + 1) % j] = levels[k];
        }
        levels.sort_by(f64::total_cmp);
        for _ in 0..1000 {
            let w = if rng.random_bool(0.05) { levels[rng.random_range(0..j)] } else { rng.random_range(-1.5..1.5) };
            if nearest_level(w, &levels) != linear_scan(w, &levels) {
                mismatches += 1;
            }
        }
        done += 1000;
    }
    Outcome {
        id: "C6",
        pass: Some(worst <= 1e-9 && mismatches == 0),
        detail: format!(
            "logistic levels vs companding cell centers: max |diff| {worst:.3e} over {cases} (mu, sigma, J) cases \
             (limit 1e-9); nearest assignment vs linear scan: {mismatches} mismatches in {done} weights"
        ),
    }
}

fn random_finite(rng: &mut impl Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random::<u32>());
        if v.is_finite() {
            return v;
        }
    }
}

fn c7_roundtrips(dir: &Path) -> Outcome {
    const CASES: usize = 10_000;
    let mut rng = synth::rng(707);
    let mut failures = [0usize; 4];

    for i in 0..CASES {
        let rows = rng.random_range(0..6usize);
        let cols = rng.random_range(0..12usize);
        let data = (0..rows * cols).map(|_| random_finite(&mut rng)).collect();
        let t = WeightTensor::new("t", rows, cols, data).unwrap();
        let bytes = encode_tensor(&t);
        let ok = match decode_tensor(&bytes, "t") {
            Ok(back) => back == t && encode_tensor(&back) == bytes,
            Err(_) => false,
        };
        let ok = ok
            && (i % 100 != 0 || {
                let p = dir.join("t.dacqt");
                save_tensor(&t, &p).unwrap();
                load_tensor(&p).map(|b| b == t).unwrap_or(false)
            });
        failures[0] += usize::from(!ok);
    }

    for _ in 0..CASES {
        let bits = [2u8, 3, 4, 8][rng.random_range(0..4)];
        let n = rng.random_range(0..64usize);
        let idx: Vec<u8> = (0..n).map(|_| rng.random_range(0..(1u16 << bits)) as u8).collect();
        let ok = pack_indices(&idx, bits).and_then(|p| unpack_indices(&p, n, bits)).map(|b| b == idx).unwrap_or(false);
        failures[1] += usize::from(!ok);
    }

    for i in 0..CASES {
        let rows = rng.random_range(1..4usize);
        let cols = rng.random_range(1..24usize);
        let family = Family::ALL[i % 3];
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let t = synth::family_tensor("q", family, rows, cols, scale, i as u64).unwrap();
        let cfg = QuantConfig {
            bits: [2u8, 3, 4, 8][i % 4],
            group_size: rng.random_range(1..=cols + 2),
            mode: Mode::ALL[(i / 4) % 3],
        };
        let a = quantize_tensor(&t, None, &cfg).unwrap();
        let bytes = encode_quantized(&a.tensor);
        let ok = match decode_quantized(&bytes, "q") {
            Ok(back) => back == a.tensor && encode_quantized(&back) == bytes,
            Err(_) => false,
        };
        failures[2] += usize::from(!ok);
        let b = quantize_tensor(&t, None, &cfg).unwrap();
        failures[3] += usize::from(encode_quantized(&b.tensor) != bytes);
    }

    Outcome {
        id: "C7",
        pass: Some(failures.iter().all(|&f| f == 0)),
        detail: format!(
            "round-trips over {CASES} fuzz cases each: tensor file {} failures, index packing {} failures, \
             quantized artifact {} failures, rerun determinism {} failures",
            failures[0], failures[1], failures[2], failures[3]
        ),
    }
}

fn c8_out_of_scope() -> Outcome {
    Outcome {
        id: "C8",
        pass: None,
        detail: "perplexity, MMLU and throughput need full inference stacks; not reproduced here, and the \
                 observation that lower reconstruction error need not improve perplexity is outside this suite"
            .into(),
    }
}

fn main() {
    // Respect `cargo test -- --list` and friends without running the suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scratch = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    let emit = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        println!("{}", line(&o));
        outcomes.push(o);
    };
    emit(c1_classification(), &mut outcomes);
    emit(c2_mse_dominance(), &mut outcomes);
    let c5 = c5_layer_profile();
    emit(c3_endpoint_dominance(&c5.fixed), &mut outcomes);
    emit(c4_alpha_search(), &mut outcomes);
    println!("{}", line(&c5.outcome));
    for r in &c5.report {
        println!("{r}");
    }
    outcomes.push(c5.outcome);
    emit(c6_oracles(), &mut outcomes);
    emit(c7_roundtrips(scratch.path()), &mut outcomes);
    emit(c8_out_of_scope(), &mut outcomes);

    let failed: Vec<&str> = outcomes.iter().filter(|o| o.pass == Some(false)).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
