//! Acceptance gate: runs every release criterion at its stated tolerance and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use dpsqkd::distill::final_length;
use dpsqkd::params::{dark_count_per_window, parse_config, DeadTimeScope, DetectorModel};
use dpsqkd::pipeline::{run_pipeline, DistillOptions};
use dpsqkd::rng::stream;
use dpsqkd::security::{
    binary_entropy, collision_prob_single, compression_factor, detection_rate, pns_info_bound,
    qber_model, secure_rate, security_threshold, usd_success_prob,
};
use dpsqkd::sim::{apply_dead_time, empirical_rates, simulate_session, DetectionEvent};
use dpsqkd::ExperimentConfig;
use rand_distr::{Distribution, Geometric};
use serde_json::Value;

type Outcome = Result<String, String>;

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper-10km.cfg")
}

fn ten_km() -> ExperimentConfig {
    parse_config(&fs::read_to_string(config_path()).unwrap()).unwrap()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dpsqkd").chain(args.iter().copied());
    let code = dpsqkd_cli::run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn formula_oracles() -> Outcome {
    let start = Instant::now();
    let det = DetectorModel {
        quantum_efficiency: 0.04,
        dark_rate_hz: 30e3,
        dead_time_s: 0.0,
        jitter_fwtm_s: 200e-12,
        window_s: 280e-12,
        window_acceptance_override: None,
    };
    let cases = [
        ("P_c0(0)", collision_prob_single(0.0).unwrap(), 0.5),
        ("tau(0, 0.2)", compression_factor(0.0, 0.2).unwrap(), 0.6),
        ("PNS bound(0.2)", pns_info_bound(0.2), 0.4),
        ("dark per window", dark_count_per_window(&det), 8.4e-6),
    ];
    for (name, got, want) in cases {
        check((got - want).abs() <= 1e-12, format!("{name} = {got:e}, want {want:e}"))?;
    }
    let t = start.elapsed().as_secs_f64();
    check(t < 1.0, format!("took {t:.3} s"))?;
    Ok(format!("4 values exact to 1e-12 in {:.1} ms", t * 1e3))
}

fn threshold() -> Outcome {
    let start = Instant::now();
    let e = security_threshold(0.2, 1.16).unwrap();
    let t = start.elapsed().as_secs_f64();
    check((0.039..=0.043).contains(&e), format!("threshold {e}"))?;
    check(secure_rate(1.0, e - 1e-6, 0.2, 1.16).unwrap() > 0.0, "rate not positive 1e-6 below root")?;
    check(secure_rate(1.0, e, 0.2, 1.16).unwrap() == 0.0, "rate positive at root")?;
    check(t < 1.0, format!("took {t:.3} s"))?;
    Ok(format!("e* = {e:.6}, bracketed to 1e-6, {:.2} ms", t * 1e3))
}

fn headline() -> Outcome {
    let path = config_path();
    let (code, out, err) = cli(&["analyze", "--config", path.to_str().unwrap()]);
    check(code == 0, format!("analyze exited {code}: {err}"))?;
    let v: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let rate = v["secure_rate_hz"].as_f64().ok_or("no secure_rate_hz")?;
    let qber = v["qber"].as_f64().ok_or("no qber")?;
    check((rate / 1.34e6 - 1.0).abs() <= 0.10, format!("secure rate {rate:.4e}"))?;
    check((qber - 0.015).abs() <= 0.003, format!("qber {qber:.5}"))?;
    Ok(format!("secure rate {rate:.4e} bit/s, qber {:.3}%", qber * 100.0))
}

fn curve_shape() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let path = config_path();
    let (code, _, err) = cli(&[
        "sweep", "--config", path.to_str().unwrap(), "--from-km", "0", "--to-km", "40",
        "--step-km", "1", "--out", out.to_str().unwrap(),
    ]);
    check(code == 0, format!("sweep exited {code}: {err}"))?;
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    check(rows.len() == 41, format!("{} rows", rows.len()))?;
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i].parse().unwrap()).collect() };
    let (sift, qber, secure) = (col(1), col(2), col(4));
    let flags: Vec<bool> = rows.iter().map(|r| r[5] == "true").collect();

    // constant log-decrement means exponential decay in distance
    let steps: Vec<f64> = sift.windows(2).map(|w| (w[0] / w[1]).ln()).collect();
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    check(steps.iter().all(|s| *s > 0.0), "sifted rate not decreasing")?;
    check(
        steps.iter().all(|s| (s / mean - 1.0).abs() < 0.01),
        "sifted rate decay is not exponential",
    )?;
    check(qber.windows(2).all(|w| w[1] > w[0]), "qber not increasing")?;
    let cutoff = flags.iter().position(|f| !f).ok_or("no cutoff within 40 km")?;
    check(cutoff > 0, "insecure at 0 km")?;
    check(flags[cutoff..].iter().all(|f| !f), "secure again past the cutoff")?;
    check(secure[cutoff..].iter().all(|r| *r == 0.0), "nonzero rate past the cutoff")?;
    check(
        secure[..cutoff].windows(2).all(|w| w[1] < w[0]),
        "secure rate not decreasing before the cutoff",
    )?;
    let e_star = security_threshold(0.2, ten_km().protocol.ec_inefficiency).unwrap();
    check(
        qber[cutoff - 1] < e_star && qber[cutoff] >= e_star,
        format!("qber crosses e* = {e_star} elsewhere"),
    )?;
    let t = start.elapsed().as_secs_f64();
    check(t < 5.0, format!("took {t:.2} s"))?;
    Ok(format!(
        "41 rows, {:.3} dB/km decay, last secure row {} km, {:.0} ms",
        mean * 10.0 / std::f64::consts::LN_10,
        cutoff - 1,
        t * 1e3
    ))
}

fn monte_carlo() -> Outcome {
    let start = Instant::now();
    let base = ten_km();
    let mut configs: Vec<(String, ExperimentConfig)> = [7.5, 15.0, 22.5, 30.0]
        .iter()
        .map(|&km| (format!("{km} km"), base.with_length_km(km)))
        .collect();
    let mut dead = base.with_length_km(0.0);
    dead.detector0.dead_time_s = 50e-9;
    dead.detector1.dead_time_s = 50e-9;
    configs.insert(0, ("0 km, 50 ns dead time".into(), dead));

    let slots = 10_000_000u64;
    let mut worst: f64 = 0.0;
    for (i, (name, c)) in configs.iter().enumerate() {
        let (rec, log) = simulate_session(c, 1000 + i as u64, slots);
        let emp = empirical_rates(&rec, &log, c).map_err(|e| e.to_string())?;
        let duration = slots as f64 * c.source.pulse_interval_s();
        let rate = detection_rate(c);
        let rate_se = (rate * duration).sqrt() / duration;
        let q = qber_model(c);
        let q_se = (q * (1.0 - q) / emp.events as f64).sqrt();
        let zr = (emp.sifted_rate_hz - rate) / rate_se;
        let zq = (emp.qber - q) / q_se;
        worst = worst.max(zr.abs()).max(zq.abs());
        check(
            zr.abs() < 3.0 && zq.abs() < 3.0,
            format!(
                "{name}: rate {:.4e} vs {rate:.4e} ({zr:+.2} se), qber {:.5} vs {q:.5} ({zq:+.2} se)",
                emp.sifted_rate_hz, emp.qber
            ),
        )?;
    }
    let t = start.elapsed().as_secs_f64();
    check(t < 60.0, format!("took {t:.1} s"))?;
    Ok(format!("5 configs x 1e7 slots, worst deviation {worst:.2} se, {t:.1} s"))
}

fn dead_time() -> Outcome {
    // Poisson-like clicks on two detectors: per-slot probability p each, so the
    // total rate is r = 2p per slot and t_d is counted in slots.
    let p = 1e-4;
    let slots = 5_000_000_000u64;
    let gap = Geometric::new(p).unwrap();
    let mut events = Vec::new();
    for det in 0..2u8 {
        let mut rng = stream(77, &format!("dead-time-{det}"));
        let mut slot = 0u64;
        loop {
            slot += gap.sample(&mut rng) + 1;
            if slot >= slots {
                break;
            }
            events.push(DetectionEvent {
                slot_index: slot,
                detector_id: det,
                time_offset_ps: 0,
            });
        }
    }
    events.sort_by_key(|e| (e.slot_index, e.detector_id));
    let mut parts = Vec::new();
    for rtd in [0.1, 0.5, 1.0] {
        let td_slots = rtd / (2.0 * p);
        let kept = apply_dead_time(&events, td_slots, 1.0, DeadTimeScope::PerDetector)
            .map_err(|e| e.to_string())?;
        let n = events.len() as f64;
        let frac = kept.len() as f64 / n;
        let want = (-rtd / 2.0f64).exp();
        let sigma = (want * (1.0 - want) / n).sqrt();
        let z = (frac - want) / sigma;
        check(z.abs() < 3.0, format!("r t_d = {rtd}: kept {frac:.5}, want {want:.5} ({z:+.2} sigma)"))?;
        parts.push(format!("{rtd}: {frac:.4} ({z:+.1}s)"));
    }
    Ok(format!("{} events; r t_d {}", events.len(), parts.join(", ")))
}

fn distillation() -> Outcome {
    let c = ten_km();
    let opts = DistillOptions::default();
    let runs = 100u64;
    let mut verified = 0;
    let mut ratios = Vec::new();
    for seed in 0..runs {
        let out = run_pipeline(&c, seed, 10_000_000, &opts).map_err(|e| e.to_string())?;
        let r = &out.report;
        if !r.verified {
            continue;
        }
        verified += 1;
        check(
            out.sender_key.bits == out.receiver_key.bits,
            format!("seed {seed}: verified keys differ"),
        )?;
        let n = r.keys.reconciled;
        let e = r.reconciliation.flips as f64 / n as f64;
        let ratio = r.leakage.reconciliation_parities as f64 / n as f64 / binary_entropy(e);
        check(
            (1.0..=1.35).contains(&ratio),
            format!("seed {seed}: leakage/n = {ratio:.3} h2(e) at e = {e:.4}"),
        )?;
        ratios.push(ratio);
        let tau = r.tau.ok_or("no tau")?;
        let exact = n as f64 * tau
            - r.leakage.total_disclosed as f64
            - c.protocol.pa_margin_bits as f64;
        let m = r.keys.final_bits;
        check(
            m == final_length(n, tau, r.leakage.total_disclosed, c.protocol.pa_margin_bits)
                && (m as f64 - exact.max(0.0)).abs() <= 1.0,
            format!("seed {seed}: final length {m} vs {exact:.2}"),
        )?;
        check(out.receiver_key.len() as u64 == m, format!("seed {seed}: key length"))?;
    }
    check(verified >= 99, format!("{verified}/{runs} verified"))?;
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{verified}/{runs} verified, leakage/(n h2) in [{lo:.3}, {hi:.3}]"
    ))
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Runs sender and receiver processes-in-threads over loopback TCP.
fn session_pair(seed: u64, slots: u64, dir: &Path) -> Result<(), String> {
    let addr = format!("127.0.0.1:{}", free_port());
    let cfg = config_path().to_str().unwrap().to_owned();
    let send_out = dir.join("send.json");
    let recv_out = dir.join("recv.json");
    let (a, s_out) = (addr.clone(), send_out.to_str().unwrap().to_owned());
    let (c2, seed_s, slots_s) = (cfg.clone(), seed.to_string(), slots.to_string());
    let sender = thread::spawn(move || {
        cli(&[
            "session-send", "--config", &c2, "--seed", &seed_s, "--slots", &slots_s,
            "--listen", &a, "--out", &s_out,
        ])
    });
    let recv = cli(&[
        "session-recv", "--config", &cfg, "--connect", &addr, "--out",
        recv_out.to_str().unwrap(),
    ]);
    let send = sender.join().unwrap();
    check(send.0 == 0, format!("session-send exited {}: {}", send.0, send.2))?;
    check(recv.0 == 0, format!("session-recv exited {}: {}", recv.0, recv.2))
}

fn session_equivalence() -> Outcome {
    let cfg = config_path().to_str().unwrap().to_owned();
    let slots = 2_000_000u64;
    let mut bits = 0;
    for seed in 0..10u64 {
        let dir = tempfile::tempdir().unwrap();
        let local = dir.path().join("local.json");
        let (code, _, err) = cli(&[
            "distill", "--config", &cfg, "--seed", &seed.to_string(), "--slots",
            &slots.to_string(), "--out", local.to_str().unwrap(),
        ]);
        check(code == 0, format!("distill exited {code}: {err}"))?;
        session_pair(seed, slots, dir.path())?;
        let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
        let key = read("local.json.key");
        check(key == read("send.json.key"), format!("seed {seed}: sender key differs"))?;
        check(key == read("recv.json.key"), format!("seed {seed}: receiver key differs"))?;
        check(
            read("local.json") == read("send.json"),
            format!("seed {seed}: sender report differs"),
        )?;
        let mut recv: Value = serde_json::from_slice(&read("recv.json")).unwrap();
        recv["seed"] = Value::from(seed);
        let local: Value = serde_json::from_slice(&read("local.json")).unwrap();
        check(recv == local, format!("seed {seed}: receiver report differs"))?;
        check(
            read("local.json.transcript") == read("recv.json.transcript"),
            format!("seed {seed}: transcript differs"),
        )?;
        bits += local["keys"]["final"].as_u64().unwrap();
    }
    Ok(format!("10 seeds over loopback TCP, {bits} identical final bits in total"))
}

fn determinism() -> Outcome {
    let cfg = config_path().to_str().unwrap().to_owned();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut stdout = Vec::new();
    for dir in &runs {
        let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
        let commands: Vec<Vec<String>> = vec![
            vec!["analyze".into(), "--config".into(), cfg.clone()],
            vec!["sweep".into(), "--config".into(), cfg.clone(), "--out".into(), p("sweep.csv")],
            vec!["simulate".into(), "--config".into(), cfg.clone(), "--seed".into(), "9".into(),
                 "--slots".into(), "3000000".into(), "--out".into(), p("events.bin")],
            vec!["distill".into(), "--config".into(), cfg.clone(), "--seed".into(), "9".into(),
                 "--slots".into(), "3000000".into(), "--out".into(), p("run.json")],
        ];
        let mut outs = Vec::new();
        for args in &commands {
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let (code, out, err) = cli(&argv);
            check(code == 0, format!("{} exited {code}: {err}", args[0]))?;
            outs.push(out);
        }
        session_pair(9, 3_000_000, dir.path())?;
        stdout.push(outs);
    }
    check(stdout[0] == stdout[1], "stdout differs between runs")?;
    let mut names: Vec<String> = fs::read_dir(runs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in &names {
        let a = fs::read(runs[0].path().join(name)).unwrap();
        let b = fs::read(runs[1].path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        check(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts and 4 stdout streams byte-identical", names.len()))
}

fn usd_bound() -> Outcome {
    let p = usd_success_prob(0.2);
    check((p - 0.329680).abs() <= 1e-5, format!("usd(0.2) = {p}"))?;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let (code, _, err) = cli(&[
        "sweep", "--config", config_path().to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    check(code == 0, format!("sweep exited {code}: {err}"))?;
    let json: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.csv.json")).unwrap()).unwrap();
    let rows = json["points"].as_array().ok_or("no points")?;
    check(
        !rows.is_empty() && rows.iter().all(|r| r["usd_success_prob"].as_f64() == Some(p)),
        "usd_success_prob missing from a sweep row",
    )?;
    Ok(format!("usd(0.2) = {p:.6}, present in all {} sweep rows", rows.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("formula oracles", formula_oracles),
        ("security threshold", threshold),
        ("headline reproduction", headline),
        ("curve shape", curve_shape),
        ("monte carlo vs analytic", monte_carlo),
        ("dead-time retention", dead_time),
        ("distillation end-to-end", distillation),
        ("session equivalence", session_equivalence),
        ("determinism", determinism),
        ("usd bound", usd_bound),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
