fn main() {
    std::process::exit(votereg_cli::run(std::env::args_os()));
}
