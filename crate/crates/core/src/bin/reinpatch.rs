fn main() {
    std::process::exit(reinpatch::cli::run_from(std::env::args_os()));
}
