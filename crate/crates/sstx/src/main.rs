fn main() {
    std::process::exit(sstx::run_cli());
}
