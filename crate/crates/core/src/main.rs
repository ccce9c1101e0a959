fn main() {
    std::process::exit(edge_ensemble::harness::cli::cli_main(std::env::args_os().skip(1)));
}
