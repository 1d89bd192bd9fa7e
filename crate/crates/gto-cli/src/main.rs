fn main() {
    std::process::exit(gto_cli::commands::run());
}
