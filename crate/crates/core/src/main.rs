fn main() {
    std::process::exit(gsnlab::cli::run(std::env::args_os()));
}
