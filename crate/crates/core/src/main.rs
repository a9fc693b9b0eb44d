fn main() {
    std::process::exit(ftacl::cli::main());
}
