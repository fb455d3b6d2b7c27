fn main() {
    std::process::exit(uavgnn::cli::main_with_env());
}
