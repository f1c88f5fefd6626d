use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match memrec::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share exit code 1 with config errors; help and version exit 0.
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    std::process::exit(memrec::cli::run(cli));
}
