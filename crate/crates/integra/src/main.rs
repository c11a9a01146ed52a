fn main() {
    std::process::exit(integra::cli::main());
}
