fn main() {
    std::process::exit(lagnh::cli::main());
}
