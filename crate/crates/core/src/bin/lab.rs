fn main() {
    std::process::exit(hardness_lab::cli::run(std::env::args_os()));
}
