fn main() {
    std::process::exit(gspnp::cli::run_cli());
}
