fn main() {
    std::process::exit(spiking_ssm::cli::main());
}
