fn main() {
    std::process::exit(metalab::harness::run_cli(std::env::args_os()));
}
