fn main() {
    std::process::exit(snapvol::cli::run(std::env::args_os()));
}
