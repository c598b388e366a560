fn main() {
    std::process::exit(gume::cli_main());
}
