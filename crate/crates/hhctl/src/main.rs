use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HHCTL_LOG", "warn")).init();
    let cli = hhctl::Cli::parse();
    let (code, message) = hhctl::run(&cli.command);
    if code == 0 {
        println!("{message}");
    } else {
        eprintln!("{}: invariants failed", cli.command.name());
        println!("{message}");
    }
    std::process::exit(code);
}
