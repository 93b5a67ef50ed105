use clap::Parser;

fn main() -> std::process::ExitCode {
    ipsi_cli::run(ipsi_cli::Cli::parse())
}
