fn main() {
    std::process::exit(pcrp::cli::run(std::env::args_os()));
}
