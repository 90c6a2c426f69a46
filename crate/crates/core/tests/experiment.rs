use std::sync::Arc;

use rtapc::clock::ClockMode;
use rtapc::experiment::{run_experiment, ExperimentConfig, Session};
use rtapc::store::{ACTUATOR, OPMODE, TUNING_KP};
use rtapc::{DataStore, Record, SharedData, TableKey};

fn virtual_cfg(duration: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.bridge.port = 0;
    cfg.run.clock = ClockMode::Virtual;
    cfg.run.duration = duration;
    cfg
}

fn key(table: &str) -> TableKey {
    TableKey::new(table, 1).unwrap()
}

#[test]
fn virtual_runs_are_bit_identical() {
    let a = run_experiment(virtual_cfg(120.0), None).unwrap();
    let b = run_experiment(virtual_cfg(120.0), None).unwrap();
    assert_eq!(a.rows.len(), 60);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.t, x.y.to_bits(), x.u.to_bits()), (y.t, y.y.to_bits(), y.u.to_bits()));
    }
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    a.write_artifacts(dir_a.path()).unwrap();
    b.write_artifacts(dir_b.path()).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("timeseries.csv")).unwrap();
    assert_eq!(read(&dir_a), read(&dir_b));
}

#[test]
fn plant_inputs_replay_actuator_history() {
    let cfg = virtual_cfg(60.0);
    let u_bar = cfg.controller.u_bar;
    let bridge_dt = cfg.bridge.interval;
    let report = run_experiment(cfg, None).unwrap();
    for (t, step) in &report.plant.rows {
        // At shared instants the simulator runs before the bridge, so the
        // input in effect came from the last bridge tick strictly earlier.
        let k = ((t - 1e-6) / bridge_dt).floor();
        let expected = if k < 0.0 {
            u_bar
        } else {
            let t_b = k * bridge_dt;
            report.rows.iter().rev().find(|r| r.t < t_b - 1e-6).map_or(u_bar, |r| r.u)
        };
        assert_eq!(step.u[0].to_bits(), expected.to_bits(), "t = {t}");
    }
}

#[test]
fn manual_mode_freezes_actuator() {
    let store = Arc::new(DataStore::new());
    let session = Session::start(virtual_cfg(60.0), store.clone()).unwrap();
    session.run_until(20.0).unwrap();
    let before = store.history(&key(ACTUATOR)).unwrap();
    store.insert_int(&key(OPMODE), Record::ok(session.clock().now_utc(), 0)).unwrap();
    session.run_until(40.0).unwrap();
    assert_eq!(store.history(&key(ACTUATOR)).unwrap(), before);

    store.insert_int(&key(OPMODE), Record::ok(session.clock().now_utc(), 1)).unwrap();
    session.run_until(60.0).unwrap();
    assert!(store.history(&key(ACTUATOR)).unwrap().len() > before.len());
    session.finish().unwrap();
}

#[test]
fn tuning_written_to_store_reaches_controller() {
    let store = Arc::new(DataStore::new());
    let session = Session::start(virtual_cfg(10.0), store.clone()).unwrap();
    session.run_until(3.0).unwrap();
    store.insert_float(&key(TUNING_KP), Record::ok(session.clock().now_utc(), 1.0)).unwrap();
    session.run_until(5.0).unwrap();
    let report = session.finish().unwrap();
    // Rows at t = 0, 2 use Kp = 0.2; the row at t = 4 uses Kp = 1.0.
    let [r0, r1, r2] = report.rows[..] else { panic!("{:?}", report.rows) };
    let i2 = 0.2 * 2.0 / 10.0 * ((r0.z_bar - r0.y) + (r1.z_bar - r1.y));
    assert_eq!(r2.u, 1.0 * (r2.z_bar - r2.y) + i2);
}

#[test]
fn full_run_reports_three_settled_segments() {
    let report = run_experiment(virtual_cfg(450.0), None).unwrap();
    assert_eq!(report.segments.len(), 3);
    let t_ends: Vec<f64> = report.segments.iter().map(|s| s.t_end).collect();
    assert_eq!(t_ends, vec![148.0, 298.0, 448.0]);
    for s in &report.segments {
        assert!(s.tracking_error <= 0.01 * s.z_bar.abs(), "{s:?}");
        assert!(s.input_error <= 0.005, "{s:?}");
    }
    for name in ["p", "c", "cl"] {
        let t = &report.timers[name];
        assert_eq!(t.overruns, 0);
        assert!(t.drift.unwrap().abs() < 1e-6, "{name}: {:?}", t.drift);
    }
}

#[test]
fn startup_failure_names_the_module() {
    let mut cfg = virtual_cfg(10.0);
    cfg.bridge.host = "256.0.0.1".into();
    let err = Session::start(cfg, Arc::new(DataStore::new())).err().expect("bad host");
    let text = err.to_string();
    assert!(text.starts_with("bridge:") || text.starts_with("plant server:"), "{text}");
}

#[test]
fn external_plant_server_is_used() {
    use rtapc::ode::FirstOrderModel;
    use rtapc::server::PlantServer;
    use rtapc::simulator::PlantState;
    use rtapc::Clock;

    let model = FirstOrderModel::new(10.0, 10.0).unwrap();
    let plant = PlantState::new(&model, vec![1.25], vec![0.0]).unwrap().shared();
    let server = PlantServer::bind_and_spawn("127.0.0.1:0".parse().unwrap(), plant.clone(), Clock::wall()).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.bridge.port = server.local_addr().port();
    cfg.run.external_plant = true;
    cfg.run.duration = 2.5;
    let report = run_experiment(cfg, None).unwrap();
    assert!(!report.timers.contains_key("p"));
    assert!(report.plant.rows.is_empty());
    let last = report.rows.last().unwrap();
    assert_eq!(last.y, 1.25);
    assert_eq!(plant.lock().unwrap().u(), &[last.u]);
}
