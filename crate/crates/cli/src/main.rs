fn main() {
    std::process::exit(lazyprune_cli::run(std::env::args_os()));
}
