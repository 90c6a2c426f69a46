use std::error::Error;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rtapc::clock::ClockMode;
use rtapc::experiment::{ExperimentConfig, Report, Session, TIMER_SIMULATOR};
use rtapc::ode::FirstOrderModel;
use rtapc::scheduler::{Scheduler, TimerSpec};
use rtapc::server::{PlantServer, DEFAULT_PORT};
use rtapc::simulator::{simulator_tick, PlantState, SimConfig};
use rtapc::{Clock, DataStore};
use rtapc_gateway::Gateway;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "rtapc", version, about = "Networked PI control of a simulated plant")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the closed-loop experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve a simulated plant over TCP.
    ServePlant(PlantArgs),
    /// Run the experiment live with the HTTP/WebSocket gateway attached.
    Gateway {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Experiment configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write artifacts here when the run ends.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Virtual,
}

#[derive(Args)]
struct RunArgs {
    /// Seconds to run; overrides run.duration.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_enum)]
    clock: Option<ClockArg>,
    /// Plant server host for the bridge.
    #[arg(long)]
    server_host: Option<String>,
    #[arg(long)]
    server_port: Option<u16>,
    /// Bridge interval, seconds.
    #[arg(long)]
    interval: Option<f64>,
    /// Connect to an already running plant server instead of embedding one.
    #[arg(long)]
    external_plant: bool,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(d) = self.duration {
            cfg.run.duration = d;
        }
        if let Some(c) = self.clock {
            cfg.run.clock = match c {
                ClockArg::Wall => ClockMode::Wall,
                ClockArg::Virtual => ClockMode::Virtual,
            };
        }
        if let Some(h) = &self.server_host {
            cfg.bridge.host = h.clone();
        }
        if let Some(p) = self.server_port {
            cfg.bridge.port = p;
        }
        if let Some(i) = self.interval {
            cfg.bridge.interval = i;
        }
        cfg.run.external_plant |= self.external_plant;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    FirstOrder,
}

#[derive(Args)]
struct PlantArgs {
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, value_enum, default_value = "first-order")]
    model: ModelArg,
    #[arg(long = "K", default_value_t = 10.0)]
    gain: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    /// Simulator interval, seconds.
    #[arg(long = "Ts_p", default_value_t = 0.2)]
    interval: f64,
    /// Integration steps per interval.
    #[arg(long = "N", default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    x0: f64,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    duration: Option<f64>,
}

fn load(config: Option<&PathBuf>, run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    run.apply(&mut cfg);
    Ok(cfg)
}

fn print_summary(report: &Report) {
    for s in &report.segments {
        println!(
            "segment {}: z_bar = {} y = {:.6} u = {:.6} (t = {})",
            s.segment, s.z_bar, s.y_end, s.u_end, s.t_end
        );
    }
    for (name, t) in &report.timers {
        match &t.jitter {
            Some(j) => println!(
                "timer {name}: {} ticks, {} overruns, mean dt = {:.6} s, std = {:.3e} s",
                t.ticks, t.overruns, j.mean, j.std_dev
            ),
            None => println!("timer {name}: {} ticks, {} overruns", t.ticks, t.overruns),
        }
    }
}

fn run(config: PathBuf, out: PathBuf, args: RunArgs) -> Result<()> {
    let cfg = load(Some(&config), &args)?;
    let report = rtapc::experiment::run_experiment(cfg, Some(&out))?;
    print_summary(&report);
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn serve_plant(args: PlantArgs) -> Result<()> {
    let ModelArg::FirstOrder = args.model;
    let model = FirstOrderModel::new(args.gain, args.tau)?;
    let sim = SimConfig::new(args.interval, args.steps)?;
    let clock = Clock::wall();
    let plant = PlantState::new(&model, vec![args.x0], vec![0.0])?.shared();
    let addr = rtapc::bridge::BridgeConfig { host: args.host.clone(), port: args.port, ..Default::default() }.resolve()?;
    let server = PlantServer::bind_and_spawn(addr, plant.clone(), clock.clone())?;
    let scheduler = Scheduler::new(clock);
    let timer = scheduler.create_timer(TimerSpec::new(TIMER_SIMULATOR, args.interval)?, move |_| {
        if let Err(e) = simulator_tick(&plant, &model, &sim) {
            log::error!("simulator: {e}");
        }
    })?;
    timer.start()?;
    println!("plant server listening on {}", server.local_addr());
    match args.duration {
        Some(d) => thread::sleep(Duration::from_secs_f64(d.max(0.0))),
        None => loop {
            thread::park();
        },
    }
    timer.stop()?;
    server.shutdown();
    Ok(())
}

fn gateway(port: u16, host: String, config: Option<PathBuf>, out: Option<PathBuf>, args: RunArgs) -> Result<()> {
    let cfg = load(config.as_ref(), &args)?;
    let duration = cfg.run.duration;
    let runtime = tokio::runtime::Runtime::new()?;
    let store = Arc::new(DataStore::new());
    let session = Session::start(cfg, store.clone())?;
    if let Some(server) = session.plant_server() {
        println!("plant server listening on {}", server.local_addr());
    }
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    println!("gateway listening on http://{}", listener.local_addr()?);
    let gw = Gateway::new(store, session.clock().clone()).with_timers(session.registry());
    runtime.spawn(async move {
        if let Err(e) = gw.serve(listener).await {
            log::error!("gateway: {e}");
        }
    });
    session.run_until(duration)?;
    let report = session.finish()?;
    print_summary(&report);
    if let Some(dir) = out {
        report.write_artifacts(&dir)?;
        println!("artifacts written to {}", dir.display());
    }
    runtime.shutdown_timeout(Duration::from_secs(1));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run { config, out, run: args } => run(config, out, args),
        Cmd::ServePlant(args) => serve_plant(args),
        Cmd::Gateway { port, host, config, out, run: args } => gateway(port, host, config, out, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
