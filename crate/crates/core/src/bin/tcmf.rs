use clap::Parser;

fn main() {
    let cli = tcmf::cli::Cli::parse();
    std::process::exit(tcmf::cli::execute(cli));
}
