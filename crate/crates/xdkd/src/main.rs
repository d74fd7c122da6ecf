fn main() {
    std::process::exit(xdkd::cli::main());
}
