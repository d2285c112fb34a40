fn main() {
    std::process::exit(tag_core::cli::run_from(std::env::args_os()));
}
