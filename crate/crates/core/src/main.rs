fn main() {
    std::process::exit(hyswitch::app::run_cli(std::env::args_os()));
}
