use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn keyweave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyweave"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kw-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn kiosk_issue_and_verify() {
    let dir = scratch("kiosk");
    let (sk, pk) = (dir.join("kiosk.key"), dir.join("kiosk.pub"));
    assert!(keyweave(&["kiosk", "keygen", "--secret", s(&sk), "--public", s(&pk)]).status.success());
    let issued = keyweave(&[
        "kiosk", "issue", "--key", s(&sk), "--proxy", "10.0.0.5:8443", "--validity", "300", "--now", "1000",
    ]);
    assert!(issued.status.success());
    let cred = stdout(&issued).trim().to_owned();

    let ok = keyweave(&["kiosk", "verify", "--public", s(&pk), "--credential", &cred, "--now", "1300"]);
    assert!(ok.status.success());
    assert_eq!(stdout(&ok).trim(), "accepted proxy=10.0.0.5:8443 expiry=1300");

    let file = dir.join("cred.txt");
    std::fs::write(&file, &cred).unwrap();
    let at = format!("@{}", s(&file));
    let late = keyweave(&["kiosk", "verify", "--public", s(&pk), "--credential", &at, "--now", "1301"]);
    assert_eq!(late.status.code(), Some(2));
    assert_eq!(stdout(&late).trim(), "rejected Expired");

    let mut forged = cred.into_bytes();
    forged[3] = if forged[3] == b'A' { b'B' } else { b'A' };
    let forged = String::from_utf8(forged).unwrap();
    let bad = keyweave(&["kiosk", "verify", "--public", s(&pk), "--credential", &forged, "--now", "1000"]);
    assert_eq!(bad.status.code(), Some(2));

    let zero = keyweave(&["kiosk", "issue", "--key", s(&sk), "--proxy", "p:1", "--validity", "0"]);
    assert!(!zero.status.success());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn analyze_tables() {
    let opt = stdout(&keyweave(&["analyze", "optimum", "--budget", "1,2", "--allocation", "2,6"]));
    let mut lines = opt.lines();
    assert_eq!(lines.next(), Some("budget,capacities,recovery,interior_formula,uniform_bound"));
    assert!(lines.next().unwrap().starts_with("1,0.25 0.75,0.01112365722656"));
    assert!(lines.next().unwrap().starts_with("2,1 1,1,"));

    let div = stdout(&keyweave(&[
        "analyze", "diversity", "--budget", "2", "--fragments", "8", "--epsilon", "0.00390625",
    ]));
    assert_eq!(div.lines().nth(1), Some("2,8,0.00390625,4,0.00390625"));

    let rec = stdout(&keyweave(&[
        "analyze", "recovery", "--capacities", "0.5,0.5", "--allocation", "4,4", "--trials", "20000",
    ]));
    assert!(rec.contains("closed_form,fragment_level,0.00390625,"));
    assert!(rec.contains("enumeration,per_type,0.25,"));
    assert_eq!(rec.lines().filter(|l| l.starts_with("monte_carlo")).count(), 2);

    let pool = stdout(&keyweave(&[
        "analyze", "pool", "--pool-size", "10", "--surveilled", "3", "--forward-probability", "0.5",
        "--max-hops", "8", "--requests", "5000",
    ]));
    assert!(pool.contains("expected_hops,1.9921875,"));
    assert!(pool.contains("entry_exit_surveilled_multi_hop,0.09"));
    assert!(pool.contains("exit_uniformity_p_value,,"));

    let bad = keyweave(&["analyze", "optimum", "--budget", "5", "--allocation", "2,6"]);
    assert!(!bad.status.success());
}

#[test]
fn analyze_verify_passes() {
    let out = keyweave(&["analyze", "verify"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn bench_run_and_plot() {
    let dir = scratch("bench");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"id": "smoke", "runs": 3, "num_splits": 4, "seed": 5}"#).unwrap();
    let (raw, summary, svg) = (dir.join("raw.csv"), dir.join("summary.csv"), dir.join("plot.svg"));
    let run = keyweave(&[
        "bench", "run", "--config", s(&cfg), "--out", s(&raw), "--summary", s(&summary),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let printed = stdout(&run);
    assert!(printed.starts_with("config_id,side,metric,count,"));
    assert_eq!(std::fs::read_to_string(&summary).unwrap(), printed);
    // header + three trials on each of three sides
    assert_eq!(std::fs::read_to_string(&raw).unwrap().lines().count(), 10);

    let plot = keyweave(&["bench", "plot", "--in", s(&raw), "--out", s(&svg)]);
    assert!(plot.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("smoke: mean latency"));

    std::fs::write(&cfg, r#"{"runs": 0}"#).unwrap();
    assert!(!keyweave(&["bench", "run", "--config", s(&cfg), "--out", s(&raw)]).status.success());
    std::fs::remove_dir_all(dir).unwrap();
}
