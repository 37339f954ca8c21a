fn main() {
    std::process::exit(volterra_games::cli::main_with_args(std::env::args_os()));
}
