fn main() {
    std::process::exit(survtopic::cli::run(std::env::args_os()));
}
