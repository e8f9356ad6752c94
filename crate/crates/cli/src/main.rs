use clap::Parser;

fn main() {
    std::process::exit(crpn_cli::run(crpn_cli::Cli::parse()));
}
