use clap::Parser;

fn main() {
    let cli = dvr::cli::Cli::parse();
    std::process::exit(dvr::cli::run(cli));
}
