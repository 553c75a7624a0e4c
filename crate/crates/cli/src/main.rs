fn main() {
    std::process::exit(npgrid_cli::run_cli(std::env::args_os()));
}
