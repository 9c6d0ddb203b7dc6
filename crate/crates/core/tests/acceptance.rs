//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Every criterion runs even when an earlier one fails; the test fails at the
//! end if any did.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gondola_core::config::RigConfig;
use gondola_core::controller::{parse_trace, Controller, RecordKind, ScriptedDevice};
use gondola_core::evaluation::{fit_pileup, run_linear, run_spatial, ExperimentSpec, FitTarget};
use gondola_core::kinematics::{
    distance, forward_kinematics, spool_deltas, tension_feasibility, tension_feasibility_nnls, wire_lengths,
    AnchorLayout, Point3,
};
use gondola_core::protocol::{decode, encode, Command, Emulator, EmulatorOptions, LocalSession, Reply};
use gondola_core::spool::{SpoolParams, SpoolState};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_file(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", name].iter().collect();
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ceiling_layout() -> AnchorLayout {
    AnchorLayout::new(vec![
        Point3::new(0.0, 0.0, 310.0),
        Point3::new(650.0, 0.0, 310.0),
        Point3::new(325.0, 390.0, 310.0),
    ])
    .unwrap()
}

/// Rank correlation for distinct values, written out independently of the
/// library's tie-aware version.
fn rank_correlation(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| v.iter().filter(|b| *b < a).count() as f64)
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn fitted_pileup() -> Result<f64, String> {
    let fit = fit_pileup(&ExperimentSpec::default(), &FitTarget::default()).map_err(|e| e.to_string())?;
    Ok(fit.pileup)
}

fn step_resolution() -> Outcome {
    let p = SpoolParams::default();
    // oracle: circumference of a 2 cm wheel over 200 full steps
    let oracle = 2.0 * PI * 2.0 / (360.0 / 1.8);
    let step = p.ideal_step_length();
    ensure((step - oracle).abs() < 1e-12, || format!("step {step} vs {oracle}"))?;
    ensure((step * 1e4).round() / 1e4 == 0.0628, || format!("step {step} does not round to 0.0628"))?;
    ensure((step * 1e3).floor() / 1e3 == 0.062, || format!("step {step} is not 0.062 cm to three places"))?;
    let force = p.holding_force().map_err(|e| e.to_string())?;
    ensure(force == 2400.0, || format!("holding force {force}"))?;
    Ok(format!("step {step:.5} cm, holding force {force} g"))
}

fn sub_two_cm() -> Outcome {
    let phi = fitted_pileup()?;
    let recs = run_spatial(&ExperimentSpec::default(), phi).map_err(|e| e.to_string())?;
    let errs: Vec<f64> = recs.iter().map(|r| r.abs_err_cm).collect();
    ensure(errs.iter().all(|e| *e < 2.0), || format!("errors {errs:?} at phi {phi}"))?;
    ensure(recs.iter().all(|r| r.commanded_cm == 30.0), || "moves are not 30 cm".into())?;
    Ok(format!("phi {phi:.4}: errors {errs:.3?} cm"))
}

fn linear_trend() -> Outcome {
    let phi = fitted_pileup()?;
    let spec = ExperimentSpec::default();
    let recs = run_linear(&spec, phi).map_err(|e| e.to_string())?;
    ensure(recs.len() == 13, || format!("{} positions", recs.len()))?;
    let x: Vec<f64> = recs.iter().map(|r| r.start_cm).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.rel_err).collect();
    ensure(x == (1..=13).map(|k| 50.0 * k as f64).collect::<Vec<_>>(), || format!("starts {x:?}"))?;
    let rho = rank_correlation(&x, &y);
    ensure(rho < -0.9, || format!("rho {rho}"))?;
    Ok(format!("rho {rho:.3}, rel err {:.4} -> {:.4}", y[0], y[12]))
}

fn spatial_trend() -> Outcome {
    let phi = fitted_pileup()?;
    let recs = run_spatial(&ExperimentSpec::default(), phi).map_err(|e| e.to_string())?;
    let e: Vec<f64> = recs.iter().map(|r| r.abs_err_cm).collect();
    ensure(e[0] < e[1] && e[0] < e[2], || format!("errors {e:?}"))?;
    Ok(format!("{:.3} < {:.3}, {:.3}", e[0], e[1], e[2]))
}

fn kinematics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layout = ceiling_layout();
    let mut worst = 0.0f64;
    let mut poses = 0;
    while poses < 10_000 {
        let p = Point3::new(rng.random_range(0.0..650.0), rng.random_range(0.0..390.0), rng.random_range(5.0..300.0));
        if !tension_feasibility(&layout, p, 500.0, 1e9).map_err(|e| e.to_string())?.feasible {
            continue;
        }
        let back = forward_kinematics(&layout, &wire_lengths(&layout, p)).map_err(|e| format!("{p}: {e}"))?;
        worst = worst.max(distance(back, p));
        poses += 1;
    }
    ensure(worst < 1e-9, || format!("IK->FK worst {worst:e} cm"))?;

    let mut agreements = 0;
    let mut feasible = 0;
    while agreements < 1000 {
        let anchors: Vec<Point3> = (0..3)
            .map(|_| Point3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(200.0..400.0)))
            .collect();
        let Ok(layout) = AnchorLayout::new(anchors) else { continue };
        let p = Point3::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(0.0..190.0));
        let Ok(analytic) = tension_feasibility(&layout, p, 500.0, 1e9) else { continue };
        let lp = tension_feasibility_nnls(&layout, p, 500.0, 1e9).map_err(|e| e.to_string())?;
        ensure(analytic.feasible == lp.feasible, || format!("verdicts differ at {p} for {layout:?}"))?;
        if let (Some(a), Some(b)) = (&analytic.tensions, &lp.tensions) {
            let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            ensure(gap < 1e-6 * 500.0, || format!("tensions differ by {gap} g at {p}"))?;
            feasible += 1;
        }
        agreements += 1;
    }

    let mut checked = 0;
    for phi in [0.0, 0.2854, 1.0] {
        let s = SpoolState::new(SpoolParams::default().with_pileup(phi), 1000.0).map_err(|e| e.to_string())?;
        for n in -10_000i64..=10_000 {
            let (len, _) = s.length_for_steps(n).map_err(|e| format!("n={n}: {e}"))?;
            let (back, residual) = s.steps_for_length(len);
            ensure(back == n && residual.abs() < 1e-9, || format!("phi {phi} n {n}: {back} residual {residual}"))?;
            checked += 1;
        }
    }
    Ok(format!(
        "{poses} poses worst {worst:.1e} cm, {agreements} rigs agree ({feasible} feasible), {checked} spool inverses"
    ))
}

fn planner_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layout = ceiling_layout();
    let feasible = |p: Point3| tension_feasibility(&layout, p, 500.0, 7000.0).map(|t| t.feasible).unwrap_or(false);
    let sample = |rng: &mut ChaCha8Rng| loop {
        let p = Point3::new(rng.random_range(50.0..600.0), rng.random_range(30.0..360.0), rng.random_range(20.0..280.0));
        if feasible(p) {
            return p;
        }
    };
    let (mut worst, mut moves, mut max_rate) = (0.0f64, 0, 0.0f64);
    while moves < 100 {
        let from = sample(&mut rng);
        let to = sample(&mut rng);
        let rig = RigConfig::new(layout.anchors().to_vec(), from).map_err(|e| e.to_string())?.with_pileup(0.0);
        let mut session = LocalSession::new(Emulator::new(rig.clone(), EmulatorOptions::default()));
        let mut controller = Controller::new(rig.clone()).map_err(|e| e.to_string())?;
        controller.connect(&mut session).map_err(|e| e.to_string())?;
        let start_spools = controller.spools().to_vec();
        let schedule = match controller.plan(to, None) {
            Ok(s) => s,
            // straight line leaves the feasible region; draw another pair
            Err(_) => continue,
        };
        let limit = controller.limits().max_step_rate;
        for seg in &schedule.segments {
            for s in &seg.steps {
                let rate = *s as f64 / (seg.duration_ms / 1000.0);
                max_rate = max_rate.max(rate.abs());
                ensure(rate.abs() <= limit + 1e-9, || format!("rate {rate} over {limit}"))?;
            }
        }
        let whole = spool_deltas(&layout, from, to);
        for (m, net) in schedule.net_steps().into_iter().enumerate() {
            let ideal = start_spools[m].steps_for_length(whole[m]).0;
            ensure((net - ideal).abs() <= 1, || format!("motor {m}: net {net} vs {ideal}"))?;
        }
        controller.execute(&mut session, to, schedule).map_err(|e| e.to_string())?;
        let truth = session.emulator().plant().expect("homed").position;
        worst = worst.max(distance(truth, to));
        moves += 1;
    }
    ensure(worst <= 0.1, || format!("worst end error {worst} cm"))?;
    Ok(format!("{moves} moves, worst {worst:.4} cm, peak rate {max_rate:.0} steps/s"))
}

fn random_command(rng: &mut ChaCha8Rng) -> Command {
    let motors = rng.random_range(1..=4);
    match rng.random_range(0..5) {
        0 => Command::Config {
            steps_per_rev: rng.random_range(1..100_000),
            base_radius_centi_um: (0..motors).map(|_| rng.random_range(0..u64::MAX)).collect(),
        },
        1 => Command::Home,
        2 => Command::Move {
            id: rng.random(),
            steps: (0..motors).map(|_| rng.random_range(-(1i64 << 31) + 1..1i64 << 31)).collect(),
            duration_ms: rng.random(),
        },
        3 => Command::Status { id: rng.random() },
        _ => Command::Ping,
    }
}

fn protocol_goldens() -> Outcome {
    let doc = repo_file("PROTOCOL.md");
    let start = doc.find("```transcript\n").ok_or("no transcript in PROTOCOL.md")? + "```transcript\n".len();
    let block: Vec<&str> = doc[start..].lines().take_while(|l| *l != "```").collect();
    let sent: Vec<&str> = block.iter().filter_map(|l| l.strip_prefix("> ")).collect();
    let verbs: Vec<&str> = sent.iter().map(|l| l.split(' ').next().unwrap()).collect();
    ensure(verbs == ["CONFIG", "HOME", "MOVE", "MOVE", "MOVE", "STATUS"], || format!("canonical session is {verbs:?}"))?;
    let replay = || {
        let rig = RigConfig::from_toml(&repo_file("samples/room.toml")).expect("sample rig");
        let mut s = LocalSession::new(Emulator::new(rig, EmulatorOptions::default())).recording();
        for line in &sent {
            s.request_raw(format!("{line}\n").as_bytes()).expect("in-process");
        }
        s.transcript().join("\n")
    };
    let first = replay();
    ensure(first == block.join("\n"), || format!("transcript differs:\n{first}"))?;
    ensure(first == replay(), || "replay not deterministic".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let cmd = random_command(&mut rng);
        let back = decode(&encode(&cmd)).map_err(|e| format!("{cmd:?}: {e}"))?;
        ensure(back == cmd, || format!("{cmd:?} came back as {back:?}"))?;
    }

    let corpus = [
        "MOVE id=x m0=+1 t=5",
        "MOVE id=1 m0=+1",
        "MOVE id=1 m0=1 t=5",
        "MOVE id=1 m0=+2147483648 t=5",
        "MOVE id=1 m0=+1 t=5 x=1",
        "MOVE  id=1 m0=+1 t=5",
        "CONFIG motors=5 spr=200 r0=1 r1=1 r2=1 r3=1 r4=1",
        "STATUS",
        "HOME now",
        "FLY",
        "",
    ];
    let rig = RigConfig::from_toml(&repo_file("samples/room.toml")).map_err(|e| e.to_string())?;
    let mut s = LocalSession::new(Emulator::new(rig, EmulatorOptions::default()));
    for line in corpus {
        match s.request_raw(format!("{line}\n").as_bytes()) {
            Ok(Reply::Err { code, id: 0, .. }) if code.as_str() == "BADCMD" => {}
            other => return Err(format!("{line:?} -> {other:?}")),
        }
    }
    ensure(
        matches!(s.request_raw(b"PING\n"), Ok(Reply::Ack { id: 0 })),
        || "session died after malformed lines".into(),
    )?;
    Ok(format!("{} golden lines, 1000 round trips, {} malformed lines", block.len(), corpus.len()))
}

fn trace_runner() -> Outcome {
    let rig = RigConfig::from_toml(&repo_file("samples/room.toml")).map_err(|e| e.to_string())?;
    let connect = || {
        let mut session = LocalSession::new(Emulator::new(rig.clone(), EmulatorOptions::default()));
        let mut controller = Controller::new(rig.clone()).expect("controller");
        controller.connect(&mut session).expect("connect");
        (session, controller)
    };

    let (mut session, mut controller) = connect();
    let trace = parse_trace("DWELL 100\nAWAIT \"ready\" 1000\nAWAIT /^T=\\d+$/ 500\n").map_err(|e| e.to_string())?;
    let mut device = ScriptedDevice::new(vec![(250, "noise".into()), (400, "ready now".into()), (2000, "T=5".into())]);
    let out = controller.run_trace(&mut session, &trace, &mut device, &mut ());
    let stamps: Vec<(u64, RecordKind)> = out.records.iter().map(|r| (r.t_ms, r.kind)).collect();
    let want = vec![(250, RecordKind::DeviceLine), (400, RecordKind::Event), (900, RecordKind::Timeout)];
    ensure(stamps == want, || format!("records {stamps:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut lines = Vec::new();
    let mut gotos = 0;
    for i in 0..50 {
        let line = match i % 5 {
            0 | 2 => {
                gotos += 1;
                format!("GOTO {:.1} {:.1} {:.1}", rng.random_range(300.0..350.0), rng.random_range(110.0..150.0), rng.random_range(120.0..170.0))
            }
            1 => format!("DWELL {}", rng.random_range(0..200)),
            3 => format!("LOG step {i}"),
            _ => "AWAIT ping 50".into(),
        };
        lines.push(line);
    }
    let trace = parse_trace(&lines.join("\n")).map_err(|e| e.to_string())?;
    ensure(trace.len() == 50, || format!("{} instructions", trace.len()))?;
    let (mut session, mut controller) = connect();
    let out = controller.run_trace(&mut session, &trace, &mut gondola_core::controller::SilentDevice, &mut ());
    ensure(!out.aborted, || format!("aborted: {:?}", out.records.last()))?;
    let starts: Vec<usize> = out
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind == RecordKind::MoveStart)
        .map(|(i, _)| i)
        .collect();
    ensure(starts.len() == gotos, || format!("{} move-starts for {gotos} GOTOs", starts.len()))?;
    for (k, &i) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(out.records.len());
        let terminal = out.records[i + 1..end]
            .iter()
            .filter(|r| matches!(r.kind, RecordKind::Ack | RecordKind::Error))
            .count();
        ensure(terminal == 1, || format!("move-start {k} has {terminal} ack/error records"))?;
    }
    Ok(format!("match at 400 ms, timeout at 900 ms, {gotos} GOTOs fully logged"))
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { name: "step resolution and holding force", budget: Duration::from_secs(1), check: step_resolution },
        Criterion { name: "spatial errors below 2 cm at fitted pile-up", budget: Duration::from_secs(10), check: sub_two_cm },
        Criterion { name: "linear error falls with deployed length", budget: Duration::from_secs(10), check: linear_trend },
        Criterion { name: "spatial error smallest near the centre", budget: Duration::from_secs(10), check: spatial_trend },
        Criterion { name: "kinematics oracle suite", budget: Duration::from_secs(30), check: kinematics_suite },
        Criterion { name: "planner bounds", budget: Duration::from_secs(30), check: planner_bounds },
        Criterion { name: "protocol goldens", budget: Duration::from_secs(10), check: protocol_goldens },
        Criterion { name: "trace runner", budget: Duration::from_secs(5), check: trace_runner },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = t0.elapsed();
        let result = result.and_then(|detail| {
            if took <= c.budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {took:.2?}, budget {:?}", c.budget))
            }
        });
        match result {
            Ok(detail) => println!("PASS {}: {detail} [{took:.2?}]", c.name),
            Err(why) => {
                println!("FAIL {}: {why} [{took:.2?}]", c.name);
                failed.push(c.name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
