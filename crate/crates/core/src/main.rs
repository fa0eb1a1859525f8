fn main() {
    std::process::exit(divt::cli::main());
}
