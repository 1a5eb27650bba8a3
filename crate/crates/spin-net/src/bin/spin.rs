use clap::error::ErrorKind;
use clap::Parser;
use spin_net::cli::{run, Cli};
use spin_net::evalbench::memtrack::TrackingAlloc;
use spin_net::numerics::par;

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    if let Ok(raw) = std::env::var("SPIN_NUM_THREADS") {
        match raw.parse::<usize>() {
            Ok(0) => {
                eprintln!("usage error: SPIN_NUM_THREADS must be >= 1");
                std::process::exit(1);
            }
            Ok(1) => par::set_parallel(false),
            Ok(n) => {
                #[cfg(feature = "parallel")]
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("thread pool already initialized: {e}");
                }
                #[cfg(not(feature = "parallel"))]
                log::warn!("SPIN_NUM_THREADS={n} ignored: built without the parallel feature");
            }
            Err(_) => {
                eprintln!("usage error: SPIN_NUM_THREADS={raw:?} is not a number");
                std::process::exit(1);
            }
        }
    }

    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
