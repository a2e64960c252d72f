fn main() {
    std::process::exit(deux::cli::cli_main(std::env::args_os()));
}
