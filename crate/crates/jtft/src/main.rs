fn main() {
    std::process::exit(jtft::cli::run(std::env::args_os()));
}
