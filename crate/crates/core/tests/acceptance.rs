//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::io::{self, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rtapc::clock::ClockMode;
use rtapc::control::{control_tick, ControlOutcome, PiLaw, PiState};
use rtapc::experiment::{run_experiment, ExperimentConfig, Session};
use rtapc::ode::{integrate, FirstOrderModel};
use rtapc::protocol::{pack_multi, unpack_multi, FrameReader, WireRecord};
use rtapc::store::{OPMODE, SENSOR, SETPOINT};
use rtapc::{Clock, DataStore, DimensionSpec, Record, SharedData, StatusCode, TableKey, Timestamp};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 7] = [
        ("closed-loop tracking", closed_loop_tracking),
        ("timer jitter", timer_jitter),
        ("integrator order", integrator_order),
        ("pi equivalence", pi_equivalence),
        ("protocol round trip", protocol_round_trip),
        ("store linearizability", store_linearizability),
        ("resilience", resilience),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Fixed-step RK4 for dx/dt = (K u - x) / tau with u held.
fn rk4_first_order(gain: f64, tau: f64, mut x: f64, u: f64, span: f64, steps: usize) -> f64 {
    let f = |x: f64| (-x + gain * u) / tau;
    let h = span / steps as f64;
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

fn base_config(clock: ClockMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.bridge.port = 0;
    cfg.run.clock = clock;
    cfg
}

/// Control-instant samples `(t, y, u)` of the loop without network or
/// timers. Events lie on a 0.1 s grid; at a shared instant the setpoint
/// task runs first, then the simulator, the bridge and the controller.
fn loop_oracle(cfg: &ExperimentConfig) -> Vec<(f64, f64, f64)> {
    let (p, c, s) = (&cfg.plant, &cfg.controller, &cfg.setpoint);
    let grid = 0.1;
    let every = |interval: f64| (interval / grid).round() as usize;
    let (n_sp, n_p, n_cl, n_c) = (every(s.interval), every(p.interval), every(cfg.bridge.interval), every(c.interval));
    let n_end = (cfg.run.duration / grid).round() as usize;

    let (mut x, mut u_plant, mut actuator) = (p.x0, c.u_bar, c.u_bar);
    let (mut sensor, mut setpoint): (Option<f64>, Option<f64>) = (None, None);
    let mut integral = c.i_bar;
    let mut out = Vec::new();
    for n in 0..n_end {
        if n % n_sp == 0 {
            setpoint = Some(s.values[(n / n_sp).min(s.values.len() - 1)]);
        }
        if n % n_p == 0 {
            x = rk4_first_order(p.gain, p.tau, x, u_plant, p.interval, p.steps);
        }
        if n % n_cl == 0 {
            u_plant = actuator;
            sensor = Some(x);
        }
        if n % n_c == 0 {
            if let (Some(y), Some(z)) = (sensor, setpoint) {
                let e = z - y;
                let u = c.u_bar + c.kp * e + integral;
                actuator = u;
                integral += (c.kp * c.interval / c.tau_i) * e;
                out.push((n as f64 * grid, y, u));
            }
        }
    }
    out
}

fn closed_loop_tracking() -> Outcome {
    let mut cfg = base_config(ClockMode::Virtual);
    cfg.run.duration = cfg.setpoint.interval * cfg.setpoint.values.len() as f64;
    let report = run_experiment(cfg.clone(), None).map_err(|e| e.to_string())?;
    let gain = cfg.plant.gain;
    let mut worst_track: f64 = 0.0;
    let mut worst_input: f64 = 0.0;
    let mut ok = report.segments.len() == cfg.setpoint.values.len();
    for seg in &report.segments {
        let rel = seg.tracking_error / seg.z_bar.abs();
        worst_track = worst_track.max(rel);
        worst_input = worst_input.max((seg.u_end - seg.z_bar / gain).abs());
        ok &= rel <= 0.01 && (seg.u_end - seg.z_bar / gain).abs() <= 0.005;
    }
    let oracle = loop_oracle(&cfg);
    ok &= oracle.len() == report.rows.len();
    let mut max_dev: f64 = 0.0;
    for (row, (t, y, u)) in report.rows.iter().zip(&oracle) {
        ok &= (row.t - t).abs() < 1e-6;
        max_dev = max_dev.max((row.y - y).abs()).max((row.u - u).abs());
    }
    ok &= max_dev <= 1e-9;
    check(
        ok,
        format!(
            "{} segments, max |y-z|/|z| = {worst_track:.2e}, max |u-z/K| = {worst_input:.2e}, {} control instants, max oracle deviation = {max_dev:.1e}",
            report.segments.len(),
            report.rows.len()
        ),
    )
}

fn read_jitter_csv(path: &Path) -> Result<Vec<f64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["k", "t_k", "dt_k"] {
        return Err(format!("{}: unexpected header {headers:?}", path.display()));
    }
    rdr.records()
        .map(|r| r.map_err(|e| e.to_string()).and_then(|r| r[1].parse::<f64>().map_err(|e| e.to_string())))
        .collect()
}

fn timer_jitter() -> Outcome {
    let mut cfg = base_config(ClockMode::Wall);
    cfg.run.duration = 60.0;
    let intervals = [("p", cfg.plant.interval), ("c", cfg.controller.interval), ("cl", cfg.bridge.interval)];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_experiment(cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, ts) in intervals {
        let t = read_jitter_csv(&dir.path().join(format!("jitter_{name}.csv")))?;
        let n = t.len();
        if n < 2 {
            return Err(format!("{name}: only {n} ticks"));
        }
        let mean = (t[n - 1] - t[0]) / (n - 1) as f64;
        let drift = t[n - 1] - t[0] - (n - 1) as f64 * ts;
        ok &= (mean - ts).abs() <= 0.005 * ts && drift.abs() <= 0.050;
        parts.push(format!("{name}: N={n} mean={mean:.6} drift={:.2} ms", drift * 1e3));
    }
    check(ok, parts.join("; "))
}

fn integrator_order() -> Outcome {
    let (gain, tau, x0, u, t) = (10.0, 10.0, 0.0, 1.0, 2.0);
    let model = FirstOrderModel::new(gain, tau).map_err(|e| e.to_string())?;
    let exact = gain * u + (x0 - gain * u) * (-t / tau).exp();
    let errors: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
        .iter()
        .map(|h: &f64| {
            let steps = (t / h).round() as usize;
            (integrate(&model, 0.0, t, steps, &[x0], &[u]).unwrap().final_state()[0] - exact).abs()
        })
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    let errors: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    check(ok, format!("errors [{}], ratios {ratios:.2?}", errors.join(", ")))
}

fn pi_equivalence() -> Outcome {
    let (kp, tau_i, u_bar, ts, i_bar) = (0.2, 10.0, 0.0, 2.0, 0.0);
    let clock = Clock::virtual_clock();
    let store = DataStore::new();
    let key = |t: &str| TableKey::new(t, 1).unwrap();
    store.write_dims(DimensionSpec::SCALAR, clock.now_utc()).unwrap();
    store.insert_int(&key(OPMODE), Record::ok(clock.now_utc(), 1)).unwrap();
    let mut law = PiLaw::scalar(PiState::new(kp, tau_i, u_bar, ts, i_bar).unwrap()).unwrap();

    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let mut integral = i_bar;
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let y: f64 = rng.gen_range(-100.0..100.0);
        let z: f64 = rng.gen_range(-100.0..100.0);
        store.insert_float(&key(SENSOR), Record::ok(clock.now_utc(), y)).unwrap();
        store.insert_float(&key(SETPOINT), Record::ok(clock.now_utc(), z)).unwrap();
        let e = z - y;
        let expected = u_bar + kp * e + integral;
        integral += (kp * ts / tau_i) * e;
        match control_tick(&store, &mut law, &clock) {
            Ok(ControlOutcome::Applied { u, .. }) if u[0].to_bits() == expected.to_bits() => {}
            _ => mismatches += 1,
        }
    }
    let final_ok = law.loops()[0].integral.to_bits() == integral.to_bits();
    check(mismatches == 0 && final_ok, format!("10000 steps, {mismatches} mismatches, final integrator bit-equal: {final_ok}"))
}

fn extreme_value() -> impl Strategy<Value = f64> {
    use proptest::num::f64 as f;
    prop_oneof![
        f::POSITIVE | f::NEGATIVE | f::NORMAL | f::SUBNORMAL | f::ZERO,
        prop::sample::select(vec![
            f64::MAX,
            f64::MIN,
            f64::MIN_POSITIVE,
            -f64::MIN_POSITIVE,
            f64::EPSILON,
            5e-324,
            -5e-324,
            -0.0,
            0.0,
            1e-300,
            1.7976931348623157e308,
        ]),
    ]
}

fn record() -> impl Strategy<Value = WireRecord> {
    // Years 0001..=9999.
    let micros = -62_135_596_800_000_000i64..253_402_300_799_999_999i64;
    (micros, "[A-Za-z0-9_.-]{1,12}", extreme_value()).prop_map(|(m, s, v)| {
        Record::new(Timestamp::from_unix_micros(m).unwrap(), StatusCode::new(s).unwrap(), v)
    })
}

fn same(a: &[WireRecord], b: &[WireRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.ts == y.ts && x.status == y.status && x.value.to_bits() == y.value.to_bits())
}

struct Chunked {
    data: Vec<u8>,
    pos: usize,
    cuts: Vec<usize>,
}

impl Read for Chunked {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pos >= self.data.len() {
            return Ok(0);
        }
        let want = self.cuts.pop().unwrap_or(usize::MAX).max(1);
        let n = want.min(buf.len()).min(self.data.len() - self.pos);
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

fn protocol_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    runner
        .run(&prop::collection::vec(record(), 1..8), |batch| {
            let text = pack_multi(&batch).unwrap();
            let back = unpack_multi(&text).unwrap();
            prop_assert!(same(&batch, &back));
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;

    let mut runner = TestRunner::new(Config { cases: 20, failure_persistence: None, ..Config::default() });
    let streams = (prop::collection::vec(prop::collection::vec(record(), 1..5), 1000), prop::collection::vec(1usize..200, 0..4000));
    runner
        .run(&streams, |(frames, cuts)| {
            let data: Vec<u8> = frames.iter().flat_map(|f| pack_multi(f).unwrap().into_bytes()).collect();
            let mut reader = FrameReader::new(Chunked { data, pos: 0, cuts });
            for f in &frames {
                let got = reader.recv_frame().unwrap();
                prop_assert!(same(f, &got.records));
            }
            prop_assert!(reader.recv_text().is_err());
            Ok(())
        })
        .map_err(|e| format!("reassembly: {e}"))?;
    Ok("10000 random batches round-trip; 20 streams of 1000 frames reassemble under random chunking".into())
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Write { key: usize, value: f64 },
    Read { key: usize, value: Option<f64> },
}

#[derive(Clone, Copy, Debug)]
struct Event {
    op: Op,
    invoked: u64,
    returned: u64,
}

fn store_linearizability() -> Outcome {
    let store = Arc::new(DataStore::new());
    let keys: Vec<TableKey> = (1..=3).map(|i| TableKey::new("lin", i).unwrap()).collect();
    let ticket = Arc::new(AtomicU64::new(0));
    let barrier = Arc::new(Barrier::new(2));
    let ts = Timestamp::from_unix_micros(0).unwrap();
    let workers: Vec<_> = (0..2u64)
        .map(|w| {
            let (store, keys, ticket, barrier) = (store.clone(), keys.clone(), ticket.clone(), barrier.clone());
            thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(0x11ea_0000 + w);
                let mut log = Vec::with_capacity(1000);
                barrier.wait();
                for i in 0..1000u64 {
                    let key = rng.gen_range(0..3);
                    let invoked = ticket.fetch_add(1, Ordering::SeqCst);
                    let op = if rng.gen_bool(0.5) {
                        // Unique per writer and op: w * 1e6 + i.
                        let value = (w * 1_000_000 + i) as f64;
                        store.insert_float(&keys[key], Record::ok(ts, value)).unwrap();
                        Op::Write { key, value }
                    } else {
                        Op::Read { key, value: store.recent_float(&keys[key]).ok().map(|r| r.value) }
                    };
                    let returned = ticket.fetch_add(1, Ordering::SeqCst);
                    log.push(Event { op, invoked, returned });
                }
                log
            })
        })
        .collect();
    let logs: Vec<Vec<Event>> = workers.into_iter().map(|h| h.join().unwrap()).collect();

    // The store's per-key history is the witness order. Replaying it through
    // a sequential register must explain every read within its real-time
    // window, and must contain each writer's writes in program order.
    let mut violations = Vec::new();
    let mut ops = 0;
    for (k, key) in keys.iter().enumerate() {
        let history: Vec<f64> = store.history(key).map(|h| h.iter().map(|r| r.value).collect()).unwrap_or_default();
        let events: Vec<Event> = logs.iter().flatten().copied().filter(|e| matches!(e.op, Op::Write { key, .. } | Op::Read { key, .. } if key == k)).collect();
        ops += events.len();
        let writes: Vec<Event> = events.iter().copied().filter(|e| matches!(e.op, Op::Write { .. })).collect();
        let position = |v: f64| history.iter().position(|h| *h == v);
        let write_of = |v: f64| writes.iter().find(|w| matches!(w.op, Op::Write { value, .. } if value == v)).copied();
        if history.len() != writes.len() {
            violations.push(format!("key {k}: {} writes but history has {}", writes.len(), history.len()));
        }
        for w in 0..2u64 {
            let mine: Vec<usize> = history.iter().enumerate().filter(|(_, v)| (**v as u64) / 1_000_000 == w).map(|(i, _)| i).collect();
            let values: Vec<f64> = mine.iter().map(|i| history[*i]).collect();
            if values.windows(2).any(|p| p[0] >= p[1]) {
                violations.push(format!("key {k}: writer {w} out of program order"));
            }
        }
        for e in &events {
            let Op::Read { value, .. } = e.op else { continue };
            // Latest write in the witness order that completed before the read began.
            let floor = writes
                .iter()
                .filter(|w| w.returned < e.invoked)
                .filter_map(|w| match w.op {
                    Op::Write { value, .. } => position(value),
                    _ => None,
                })
                .max();
            match (value, floor) {
                (None, None) => {}
                (None, Some(_)) => violations.push(format!("key {k}: read saw no data after a completed write")),
                (Some(v), floor) => {
                    let (Some(pos), Some(w)) = (position(v), write_of(v)) else {
                        violations.push(format!("key {k}: read returned unknown value {v}"));
                        continue;
                    };
                    if w.invoked > e.returned {
                        violations.push(format!("key {k}: read saw {v} before it was written"));
                    }
                    if floor.is_some_and(|f| pos < f) {
                        violations.push(format!("key {k}: stale read of {v}"));
                    }
                }
            }
        }
    }
    check(violations.is_empty(), format!("2 writers x 3 keys x 1000 ops ({ops} ops checked), {} violations {:?}", violations.len(), violations.iter().take(3).collect::<Vec<_>>()))
}

fn resilience() -> Outcome {
    let mut cfg = base_config(ClockMode::Virtual);
    cfg.run.duration = 120.0;
    let store = Arc::new(DataStore::new());
    let session = Session::start(cfg.clone(), store.clone()).map_err(|e| e.to_string())?;
    let cut_at = 50.0;
    session.run_until(cut_at).map_err(|e| e.to_string())?;
    if !session.link().sever() {
        return Err("no live bridge connection to sever".into());
    }
    session.run_until(cfg.run.duration).map_err(|e| e.to_string())?;
    let report = session.finish().map_err(|e| e.to_string())?;

    // Sensor stamps come from the plant server; the longest silence between
    // them is the outage.
    let stamps: Vec<f64> = store
        .history(&TableKey::new(SENSOR, 1).unwrap())
        .unwrap()
        .iter()
        .map(|r| r.ts.unix_micros() as f64 * 1e-6 - rtapc::clock::VIRTUAL_EPOCH_MICROS as f64 * 1e-6)
        .collect();
    let (gap_start, gap_end) = stamps
        .windows(2)
        .map(|w| (w[0], w[1]))
        .max_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)))
        .ok_or("no sensor data")?;
    let in_gap: Vec<_> = report.plant.rows.iter().filter(|(t, _)| *t > gap_start + 1e-6 && *t <= gap_end + 1e-6).collect();
    let Some((_, first)) = in_gap.first() else {
        return Err(format!("no simulator ticks in outage ({gap_start}, {gap_end}]"));
    };

    // Uninterrupted run from the state at the cut, input held.
    let held = first.u[0];
    let mut x = first.x_before[0];
    let mut max_dev: f64 = 0.0;
    let mut input_held = true;
    for (_, step) in &in_gap {
        x = rk4_first_order(cfg.plant.gain, cfg.plant.tau, x, held, cfg.plant.interval, cfg.plant.steps);
        max_dev = max_dev.max((step.x_after[0] - x).abs());
        input_held &= step.u[0].to_bits() == held.to_bits();
    }
    let continuous = report.plant.rows.windows(2).all(|w| w[0].1.x_after == w[1].1.x_before);
    let stats = report.bridge;
    let ok = max_dev == 0.0
        && input_held
        && continuous
        && stats.disconnects == 1
        && stats.reconnects == 1
        && gap_start < cut_at
        && gap_end > cut_at;
    check(
        ok,
        format!(
            "outage ({gap_start:.1}, {gap_end:.1}] s, {} simulator ticks with held u, max deviation {max_dev:e}, disconnects {}, reconnects {}",
            in_gap.len(),
            stats.disconnects,
            stats.reconnects
        ),
    )
}
