fn main() {
    std::process::exit(compgen::cli::main());
}
