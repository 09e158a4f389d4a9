fn main() {
    std::process::exit(gridvid_cli::run(std::env::args_os()));
}
