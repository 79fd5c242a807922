fn main() {
    std::process::exit(dual_align::cli::run(std::env::args_os()));
}
