fn main() {
    std::process::exit(fbsde_games::cli::run(std::env::args_os()));
}
