use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use dacq_cli::{cmd_eval, cmd_fit, cmd_qq_export, cmd_quantize, run, Cli, Format, RunConfig, EXIT_CONFIG, EXIT_DATA};
use dacq_core::awq::{alpha_search, channel_stats};
use dacq_core::distfit::Family;
use dacq_core::quantizer::{Mode, QuantConfig};
use dacq_core::synth;
use dacq_core::tensorio::{encode_quantized, load_quantized, save_calibration, save_tensor};

fn cfg(input: &Path, out: &Path) -> RunConfig {
    RunConfig { input: input.to_path_buf(), out: out.to_path_buf(), ..RunConfig::default() }
}

fn write_stack(dir: &Path, calib: Option<&Path>, n: usize) {
    for i in 0..n {
        let name = format!("layer{i}");
        let t = synth::logistic_mixture_tensor(&name, 8, 96, 0.02, 10 + i as u64).unwrap();
        save_tensor(&t, dir.join(format!("{name}.dacqt"))).unwrap();
        if let Some(c) = calib {
            let cal = synth::gaussian_calibration(&name, 16, 96, &[7], 100.0, 20 + i as u64).unwrap();
            save_calibration(&cal, c.join(format!("{name}.dacqt"))).unwrap();
        }
    }
}

fn small(cfg: RunConfig) -> RunConfig {
    RunConfig { group_size: 32, ..cfg }
}

#[test]
fn fit_tallies_one_tensor_per_family() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for (i, f) in Family::ALL.iter().enumerate() {
        let t = synth::family_tensor(f.as_str(), *f, 200, 1000, 0.02, 40 + i as u64).unwrap();
        save_tensor(&t, input.path().join(format!("{f}.dacqt"))).unwrap();
    }
    let s = cmd_fit(&cfg(input.path(), out.path())).unwrap();
    assert_eq!(s.tensors, 3);
    assert_eq!((s.tally["normal"], s.tally["laplace"], s.tally["logistic"]), (1, 1, 1));
    for (name, fam) in &s.best {
        assert_eq!(name, fam.as_str());
    }
    for f in Family::ALL {
        assert!(out.path().join(format!("{f}.fit.json")).is_file());
        let qq = std::fs::read_to_string(out.path().join(format!("{f}.qq.csv"))).unwrap();
        assert!(qq.starts_with("p,q_theoretical_normal,q_theoretical_laplace,q_theoretical_logistic,q_empirical"));
        assert_eq!(qq.lines().count(), 1001);
    }
    assert!(out.path().join("summary.json").is_file());
}

#[test]
fn fit_empty_dir_succeeds() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let s = cmd_fit(&cfg(input.path(), out.path())).unwrap();
    assert_eq!(s.tensors, 0);
    assert!(s.tally.values().all(|&v| v == 0));
    assert!(s.errors.is_empty());
}

#[test]
fn fit_records_corrupt_file_and_continues() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    std::fs::write(input.path().join("bad.dacqt"), b"DACQTgarbage").unwrap();
    let t = synth::family_tensor("good", Family::Logistic, 10, 100, 1.0, 1).unwrap();
    save_tensor(&t, input.path().join("good.dacqt")).unwrap();
    let s = cmd_fit(&cfg(input.path(), out.path())).unwrap();
    assert_eq!(s.tensors, 1);
    assert_eq!(s.errors.len(), 1);
    assert!(s.errors[0].file.ends_with("bad.dacqt"));
}

#[test]
fn fit_missing_input_is_data_error() {
    let out = tempfile::tempdir().unwrap();
    let err = cmd_fit(&cfg(&out.path().join("nope"), out.path())).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_DATA);
}

#[test]
fn qq_export_writes_tables_only() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 2);
    assert_eq!(cmd_qq_export(&cfg(input.path(), out.path())).unwrap(), 2);
    assert!(out.path().join("layer0.qq.csv").is_file());
    assert!(!out.path().join("layer0.fit.json").exists());
}

#[test]
fn uniform_with_alpha_search_is_the_baseline_pipeline() {
    let input = tempfile::tempdir().unwrap();
    let calib = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), Some(calib.path()), 1);
    let c = RunConfig {
        mode: Mode::Uniform,
        alpha_search: true,
        calib: Some(calib.path().to_path_buf()),
        ..small(cfg(input.path(), out.path()))
    };
    let m = cmd_quantize(&c).unwrap();
    let art = load_quantized(out.path().join("uniform/layer0.dacqq")).unwrap();

    let t = synth::logistic_mixture_tensor("layer0", 8, 96, 0.02, 10).unwrap();
    let cal = synth::gaussian_calibration("layer0", 16, 96, &[7], 100.0, 20).unwrap();
    let q = QuantConfig { bits: 4, group_size: 32, mode: Mode::Uniform };
    let direct = alpha_search(&t, &cal, &channel_stats(&cal).unwrap(), &q).unwrap();
    assert_eq!(encode_quantized(&art), encode_quantized(&direct.best.tensor));
    assert_eq!(m.entries[0].alpha_star, direct.alpha_star);
    assert_eq!(m.entries[0].alpha_losses, direct.losses);
}

#[test]
fn quantize_rerun_is_byte_identical() {
    let input = tempfile::tempdir().unwrap();
    let calib = tempfile::tempdir().unwrap();
    write_stack(input.path(), Some(calib.path()), 2);
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let c = RunConfig {
            alpha_search: true,
            calib: Some(calib.path().to_path_buf()),
            ..small(cfg(input.path(), out.path()))
        };
        cmd_quantize(&c).unwrap();
        bytes.push([0, 1].map(|i| std::fs::read(out.path().join(format!("hybrid/layer{i}.dacqq"))).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn oversized_group_gives_one_group_per_row() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let c = RunConfig { group_size: 1000, mode: Mode::Logistic, ..cfg(input.path(), out.path()) };
    cmd_quantize(&c).unwrap();
    let art = load_quantized(out.path().join("logistic/layer0.dacqq")).unwrap();
    assert_eq!(art.groups_per_row(), 1);
    assert_eq!(art.group_params.len(), 8);
}

#[test]
fn alpha_search_without_calibration_is_hard_error() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let c = RunConfig { alpha_search: true, ..small(cfg(input.path(), out.path())) };
    assert_eq!(cmd_quantize(&c).unwrap_err().exit_code(), EXIT_DATA);
}

#[test]
fn hybrid_without_calibration_falls_back() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let m = cmd_quantize(&small(cfg(input.path(), out.path()))).unwrap();
    assert_eq!(m.entries[0].objective, dacq_core::quantizer::Objective::WeightMse);
    let art = load_quantized(out.path().join("hybrid/layer0.dacqq")).unwrap();
    assert!(art.group_params.iter().all(|g| g.mse_fallback));
}

#[test]
fn eval_three_modes_matches_quantize_log() {
    let input = tempfile::tempdir().unwrap();
    let calib = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), Some(calib.path()), 2);
    let base = RunConfig { calib: Some(calib.path().to_path_buf()), ..small(cfg(input.path(), out.path())) };
    let mut manifests = Vec::new();
    for mode in Mode::ALL {
        manifests.push(cmd_quantize(&RunConfig { mode, ..base.clone() }).unwrap());
    }
    let report = cmd_eval(&base, &Mode::ALL).unwrap();
    assert!(report.missing.is_empty());
    assert_eq!(report.records.len(), 6);
    for name in ["layer0", "layer1"] {
        assert_eq!(report.records.iter().filter(|r| r.tensor_name == name).count(), 3);
    }
    for m in &manifests {
        for e in &m.entries {
            let r = report.records.iter().find(|r| r.tensor_name == e.tensor && r.mode == m.mode).unwrap();
            assert!((r.mse - e.mse).abs() <= 1e-9, "{} vs {}", r.mse, e.mse);
            assert_eq!(r.output_error, e.output_error);
        }
    }
    let csv = std::fs::read_to_string(&report.path).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let json = RunConfig { format: Format::Json, ..base.clone() };
    let r = cmd_eval(&json, &[Mode::Hybrid]).unwrap();
    assert!(r.path.ends_with("eval.json"));
}

#[test]
fn eval_lists_missing_mode_and_exits_nonzero() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let base = small(cfg(input.path(), out.path()));
    cmd_quantize(&RunConfig { mode: Mode::Uniform, ..base.clone() }).unwrap();
    let report = cmd_eval(&base, &[Mode::Uniform, Mode::Logistic]).unwrap();
    assert_eq!(report.missing, vec!["dacq-logistic".to_string()]);
    assert_eq!(report.records.len(), 1);

    let code = run(Cli::parse_from([
        "dacq",
        "eval",
        "--in",
        input.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--modes",
        "uniform,logistic",
    ]));
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn binary_exit_codes() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let exe = env!("CARGO_BIN_EXE_dacq");
    let status = |args: &[&str]| Process::new(exe).args(args).output().unwrap().status.code().unwrap();
    let i = input.path().to_str().unwrap();
    let o = out.path().to_str().unwrap();
    assert_eq!(status(&["quantize", "--in", i, "--out", o, "--group-size", "32", "--mode", "uniform"]), 0);
    assert_eq!(status(&["quantize", "--in", i, "--out", o, "--bits", "5"]), EXIT_CONFIG);
    assert_eq!(status(&["quantize", "--in", i, "--out", o, "--mode", "cubic"]), EXIT_CONFIG);
    assert_eq!(status(&["quantize", "--in", i, "--out", o, "--alpha-search"]), EXIT_DATA);
    assert_eq!(status(&["fit", "--in", "/nonexistent/dir", "--out", o]), EXIT_DATA);
    assert_eq!(status(&["gen-weights", "--out", o, "--family", "cauchy"]), EXIT_CONFIG);
}

#[test]
fn config_file_with_flag_override() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_stack(input.path(), None, 1);
    let conf = out.path().join("run.toml");
    std::fs::write(
        &conf,
        format!("in = {:?}\nout = {:?}\nmode = \"logistic\"\nbits = 2\ngroup_size = 32\n", input.path(), out.path()),
    )
    .unwrap();
    let code = run(Cli::parse_from(["dacq", "quantize", "--config", conf.to_str().unwrap(), "--bits", "3"]));
    assert_eq!(code, 0);
    let art = load_quantized(out.path().join("logistic/layer0.dacqq")).unwrap();
    assert_eq!((art.bits, art.group_size), (3, 32));
}

#[test]
fn generators_and_profile() {
    let w = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let (wp, cp, op) = (w.path().to_str().unwrap(), c.path().to_str().unwrap(), out.path().to_str().unwrap());
    let gen =
        ["dacq", "gen-weights", "--out", wp, "--family", "mixture", "--rows", "8", "--cols", "64", "--count", "2"];
    assert_eq!(run(Cli::parse_from(gen)), 0);
    let calib = ["dacq", "gen-calib", "--in", wp, "--out", cp, "--tokens", "8", "--salient", "3,9"];
    assert_eq!(run(Cli::parse_from(calib)), 0);
    let prof = [
        "dacq",
        "profile",
        "--in",
        wp,
        "--calib",
        cp,
        "--out",
        op,
        "--group-size",
        "32",
        "--alpha-search",
        "--format",
        "json",
    ];
    assert_eq!(run(Cli::parse_from(prof)), 0);
    let text = std::fs::read_to_string(out.path().join("profile.json")).unwrap();
    let rows: Vec<dacq_core::evalx::EvalRecord> = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.len(), 2 * 6);
}
