use serde_json::Value;
use ssim::steering::{read_message, write_frame, ClientMessage, Command, ServerMessage};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command as Proc, Output, Stdio};
use std::time::{Duration, Instant};

/// Runs one criterion, printing its PASS/FAIL line before any failure propagates.
fn check(name: &str, f: impl FnOnce() + std::panic::UnwindSafe) {
    let t0 = Instant::now();
    let result = std::panic::catch_unwind(f);
    println!(
        "[{}] {name} ({:.1} s)",
        if result.is_ok() { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn ssim(args: &[&str]) -> Output {
    Proc::new(env!("CARGO_BIN_EXE_ssim")).args(args).output().expect("spawn ssim")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two-sample trajectories for `n` trials, `toward` of which head to a light at +x.
fn write_fixture(dir: &Path, toward: usize, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let spread = (i as f64 / n as f64 - 0.5) * 1.2;
        let angle = if i < toward { spread } else { std::f64::consts::PI + spread };
        let (x, y) = (0.01 * angle.cos(), 0.01 * angle.sin());
        std::fs::write(dir.join(format!("t{i:03}.csv")), format!("time,x,y\n0,0,0\n60,{x},{y}\n")).unwrap();
    }
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_default_writes_trajectory_and_metadata() {
    check("run writes trajectory and metadata", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        ok(&ssim(&["run", "--seed", "3", "--out", p(&out)]));
        let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
        assert!(csv.starts_with("time,x,y\n0,0,0\n"));
        let meta = report(&out.join("trajectory.meta.json"));
        assert_eq!(meta["seed"], 3);
        assert!(meta["termination_reason"].is_string());
    });
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    check("bad input exits nonzero with a diagnostic", || {
        let dir = tempfile::tempdir().unwrap();
        let cases: Vec<Vec<String>> = vec![
            vec!["run".into(), "--out".into(), "x".into(), "--frobnicate".into()],
            vec!["launch".into()],
            vec!["run".into(), "--config".into(), "/does/not/exist.toml".into(), "--out".into(), "x".into()],
            vec!["batch".into(), "--seeds".into(), "5..2".into(), "--out".into(), "x".into()],
            vec!["analyze".into(), "--in".into(), p(dir.path()).into(), "--report".into(), "r.json".into()],
        ];
        let bad_cfg = dir.path().join("bad.toml");
        std::fs::write(&bad_cfg, "plate_half_extent = -1.0\n").unwrap();
        let mut cases = cases;
        cases.push(vec!["run".into(), "--config".into(), p(&bad_cfg).into(), "--out".into(), "x".into()]);
        for args in cases {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = ssim(&args);
            assert!(!out.status.success(), "{args:?} succeeded");
            assert!(!out.stderr.is_empty(), "{args:?} gave no diagnostic");
        }
    });
}

#[test]
fn analyze_statistics_fixtures() {
    check("analyze reproduces fixture statistics", || {
        let dir = tempfile::tempdir().unwrap();
        for (toward, n, bound) in [(49, 62, 1e-3), (21, 64, 1e-2)] {
            let data = dir.path().join(format!("fx{n}"));
            write_fixture(&data, toward, n);
            let rep = dir.path().join(format!("fx{n}.json"));
            ok(&ssim(&["analyze", "--in", p(&data), "--light-pos", "1,0", "--report", p(&rep)]));
            let r = report(&rep);
            assert_eq!(r["stats"]["toward_count"], toward);
            assert_eq!(r["stats"]["total"], n);
            assert!(r["stats"]["binomial_p"].as_f64().unwrap() < bound);
            assert_eq!(r["trials"].as_array().unwrap().len(), n);
            assert!(dir.path().join(format!("fx{n}.histogram.csv")).exists());
            assert!(dir.path().join(format!("fx{n}.msd.csv")).exists());
        }
    });
}

#[test]
fn analyze_needs_a_light_reference() {
    check("analyze demands a light reference", || {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 1, 2);
        let out = ssim(&["analyze", "--in", p(dir.path()), "--report", p(&dir.path().join("r.json"))]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("light"));
    });
}

fn short_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let out = ssim(&["default-config"]);
    ok(&out);
    let mut text = String::from_utf8(out.stdout).unwrap();
    text = text.replace("max_duration = 600.0", "max_duration = 2.0");
    text = text.replace("plate_half_extent = 0.1\n", "plate_half_extent = 0.3\n");
    let path = dir.join("cfg.toml");
    std::fs::write(&path, format!("{extra}{text}")).unwrap();
    path
}

#[test]
fn batch_then_analyze_has_one_row_per_trial() {
    check("batch then analyze, one row per trial", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short_config(dir.path(), "");
        let out = dir.path().join("batch");
        ok(&ssim(&["batch", "--config", p(&cfg), "--seeds", "0..2", "--lights", "edges", "--out", p(&out)]));
        let index = report(&out.join("batch.json"));
        assert_eq!(index.as_array().unwrap().len(), 8);
        let rep = dir.path().join("report.json");
        ok(&ssim(&["analyze", "--in", p(&out), "--report", p(&rep)]));
        let r = report(&rep);
        let trials = r["trials"].as_array().unwrap();
        assert_eq!(trials.len(), 8);
        // Each trial's reference light came from its metadata, one per edge.
        let mut xs: Vec<(i64, i64)> = trials
            .iter()
            .map(|t| ((t["light_x"].as_f64().unwrap() * 10.0).round() as i64, (t["light_y"].as_f64().unwrap() * 10.0).round() as i64))
            .collect();
        xs.sort();
        xs.dedup();
        assert_eq!(xs.len(), 4);
    });
}

#[test]
fn script_runs_cues_and_rejects_conflicts() {
    check("scripted cues and exclusive-light check", || {
        let dir = tempfile::tempdir().unwrap();
        let lights = "[[lights]]\nid = 1\nposition = [0.3, 0.0]\non = false\nintensity = 1.0\nemitters = 1\nemitter_spacing = 0.01\n\n\
                      [[lights]]\nid = 2\nposition = [-0.3, 0.0]\non = false\nintensity = 1.0\nemitters = 1\nemitter_spacing = 0.01\n\n";
        let cfg = short_config(dir.path(), "");
        let mut text = std::fs::read_to_string(&cfg).unwrap().replace("lights = []\n", "");
        text.push('\n');
        text.push_str(lights);
        std::fs::write(&cfg, text).unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(
            &good,
            "[[cues]]\ntrigger = { kind = \"at_time\", t = 0.5 }\nactions = [{ op = \"on\", id = 1 }]\n\n\
             [[cues]]\ntrigger = { kind = \"at_time\", t = 1.0 }\nactions = [{ op = \"off\", id = 1 }, { op = \"on\", id = 2 }]\n",
        )
        .unwrap();
        let out = dir.path().join("s");
        ok(&ssim(&["script", "--config", p(&cfg), "--script", p(&good), "--out", p(&out)]));
        assert!(out.join("trajectory.csv").exists());
        let bad = dir.path().join("bad.toml");
        std::fs::write(
            &bad,
            "[[cues]]\ntrigger = { kind = \"at_time\", t = 0.5 }\nactions = [{ op = \"on\", id = 1 }, { op = \"on\", id = 2 }]\n",
        )
        .unwrap();
        let res = ssim(&["script", "--config", p(&cfg), "--script", p(&bad), "--out", p(&out)]);
        assert!(!res.status.success());
        assert!(String::from_utf8_lossy(&res.stderr).contains("exclusive-light violation"));
    });
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(cfg: &Path, log_dir: &Path) -> Server {
    let mut child = Proc::new(env!("CARGO_BIN_EXE_ssim"))
        .args(["serve", "--config", p(cfg), "--port", "0", "--log-dir", p(log_dir)])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen banner").to_string();
    Server { child, addr }
}

struct Conn {
    r: BufReader<TcpStream>,
    w: TcpStream,
    next: u64,
}

impl Conn {
    fn open(addr: &str) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        Self { r: BufReader::new(s.try_clone().unwrap()), w: s, next: 1 }
    }

    fn send(&mut self, m: &ClientMessage) {
        write_frame(&mut self.w, m).unwrap();
    }

    fn recv(&mut self) -> ServerMessage {
        read_message(&mut self.r).unwrap()
    }

    /// Sends a command and returns its reply, collecting snapshots seen meanwhile.
    fn command(&mut self, cmd: Command, snaps: &mut Vec<f64>) -> ServerMessage {
        let id = self.next;
        self.next += 1;
        self.send(&ClientMessage::Command { id, cmd });
        loop {
            match self.recv() {
                ServerMessage::Snapshot(s) => snaps.push(s.time),
                ServerMessage::Reset { .. } => snaps.clear(),
                m @ (ServerMessage::Ack { id: i, .. } | ServerMessage::Error { id: Some(i), .. }) if i == id => return m,
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}

#[test]
fn steering_server_session() {
    check("steering protocol session", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short_config(dir.path(), "");
        let mut text = std::fs::read_to_string(&cfg).unwrap().replace("max_duration = 2.0", "max_duration = 600.0");
        text = text.replace("lights = []\n", "");
        text.push_str(
            "\n[[lights]]\nid = 1\nposition = [0.3, 0.0]\non = false\nintensity = 1.0\nemitters = 1\nemitter_spacing = 0.01\n\n\
             [[lights]]\nid = 2\nposition = [-0.3, 0.0]\non = false\nintensity = 1.0\nemitters = 1\nemitter_spacing = 0.01\n",
        );
        std::fs::write(&cfg, text).unwrap();
        let logs = dir.path().join("logs");
        let server = start_server(&cfg, &logs);

        // A wrong protocol version is refused with a reason.
        let mut stranger = Conn::open(&server.addr);
        let payload = r#"{"v":"ssim/0","type":"hello"}"#;
        write!(stranger.w, "{}\n{}", payload.len(), payload).unwrap();
        match stranger.recv() {
            ServerMessage::Refused { reason } => assert!(reason.contains("ssim/1")),
            other => panic!("expected refusal, got {other:?}"),
        }

        let mut c = Conn::open(&server.addr);
        c.send(&ClientMessage::Hello);
        assert!(matches!(c.recv(), ServerMessage::Welcome { .. }));
        let mut snaps = Vec::new();
        assert!(matches!(c.command(Command::Reset { seed: 7 }, &mut snaps), ServerMessage::Ack { .. }));
        assert!(matches!(c.command(Command::SetTimescale { k: 20.0 }, &mut snaps), ServerMessage::Ack { .. }));
        assert!(matches!(c.command(Command::Resume, &mut snaps), ServerMessage::Ack { .. }));

        // Malformed payloads get an error reply and the session carries on.
        let junk = r#"{"v":"ssim/1","type":"command","id":99,"cmd":{"op":"warp"}}"#;
        write!(c.w, "{}\n{}", junk.len(), junk).unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            match c.recv() {
                ServerMessage::Snapshot(s) => snaps.push(s.time),
                ServerMessage::Error { id: None, .. } => break,
                other => panic!("unexpected {other:?}"),
            }
            assert!(Instant::now() < deadline);
        }

        assert!(matches!(c.command(Command::ToggleLight { id: 1 }, &mut snaps), ServerMessage::Ack { .. }));
        match c.command(Command::ToggleLight { id: 2 }, &mut snaps) {
            ServerMessage::Error { reason, .. } => assert!(reason.contains("exclusive-light violation")),
            other => panic!("expected rejection, got {other:?}"),
        }
        while snaps.len() < 20 {
            if let ServerMessage::Snapshot(s) = c.recv() {
                snaps.push(s.time);
            }
        }
        assert!(snaps.windows(2).all(|w| w[1] > w[0]), "snapshot times not increasing: {snaps:?}");
        assert!(*snaps.last().unwrap() > 0.5, "at 20x the sim should outrun the wall clock");

        // Paused: no snapshots at all.
        assert!(matches!(c.command(Command::Pause, &mut snaps), ServerMessage::Ack { .. }));
        c.w.set_read_timeout(Some(Duration::from_millis(400))).unwrap();
        c.r.get_ref().set_read_timeout(Some(Duration::from_millis(400))).unwrap();
        let mut stray = 0;
        let t0 = Instant::now();
        while t0.elapsed() < Duration::from_millis(400) {
            match read_message::<_, ServerMessage>(&mut c.r) {
                Ok(ServerMessage::Snapshot(_)) => stray += 1,
                Ok(other) => panic!("unexpected {other:?}"),
                Err(_) => break,
            }
        }
        // At most the frame that was in flight when the pause landed.
        assert!(stray <= 1, "{stray} snapshots while paused");

        // The session log replays through the script runner.
        let log = std::fs::read_dir(&logs)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|p| p.to_str().unwrap().contains("seed7"))
            .expect("session log written");
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.lines().count() >= 4);
        let out = dir.path().join("replay");
        let mut replay_cfg = std::fs::read_to_string(&cfg).unwrap();
        replay_cfg = replay_cfg.replace("max_duration = 600.0", "max_duration = 2.0");
        let short = dir.path().join("replay.toml");
        std::fs::write(&short, replay_cfg).unwrap();
        ok(&ssim(&["script", "--config", p(&short), "--script", p(&log), "--out", p(&out)]));
    });
}
