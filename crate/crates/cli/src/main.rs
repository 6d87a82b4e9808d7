fn main() {
    std::process::exit(rltune_cli::run(std::env::args_os()));
}
