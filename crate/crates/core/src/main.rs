fn main() {
    std::process::exit(dynedit::cli::main());
}
