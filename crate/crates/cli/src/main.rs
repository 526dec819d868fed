fn main() {
    std::process::exit(mpdqte_cli::main_with(std::env::args_os()));
}
