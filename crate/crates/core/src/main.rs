fn main() {
    std::process::exit(fundus2video::cli::run(std::env::args_os()));
}
