fn main() {
    std::process::exit(cordvip::cli::run(std::env::args_os()));
}
