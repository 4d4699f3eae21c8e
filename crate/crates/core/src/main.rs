fn main() {
    std::process::exit(crsynth::cli::run(std::env::args_os()));
}
