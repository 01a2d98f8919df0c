fn main() {
    std::process::exit(cogdrive::cli::run());
}
