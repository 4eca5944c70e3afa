use clap::Parser;

fn main() {
    let cli = mevsindy::cli::Cli::parse();
    std::process::exit(mevsindy::cli::run(&cli));
}
