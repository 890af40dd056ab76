fn main() {
    std::process::exit(synthdetect::run_cli())
}
