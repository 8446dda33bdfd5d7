fn main() {
    std::process::exit(trig::cli::run(std::env::args_os()));
}
