use clap::Parser;

fn main() {
    let cli = gmb::cli::Cli::parse();
    match gmb::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
