fn main() {
    let code = nystrom3d::harness::cli_main(std::env::args());
    std::process::exit(code);
}
