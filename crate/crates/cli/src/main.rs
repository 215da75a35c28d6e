fn main() {
    std::process::exit(ptsim::cli::run(std::env::args_os()));
}
