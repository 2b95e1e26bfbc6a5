fn main() {
    std::process::exit(sgdlab_core::cli::run(std::env::args_os()));
}
