fn main() {
    std::process::exit(wsigrade::cli::run(std::env::args_os()));
}
