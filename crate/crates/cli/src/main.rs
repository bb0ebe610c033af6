use clap::Parser;

fn main() {
    let cli = shocklaw_cli::Cli::parse();
    std::process::exit(shocklaw_cli::execute(&cli));
}
