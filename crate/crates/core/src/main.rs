fn main() {
    std::process::exit(ganformer::cli::main());
}
