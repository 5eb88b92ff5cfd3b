fn main() {
    std::process::exit(depthroute::cli::main_exit_code());
}
