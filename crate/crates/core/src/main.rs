fn main() {
    std::process::exit(symmcomp::cli::run(std::env::args_os()));
}
