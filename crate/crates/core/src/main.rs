fn main() {
    std::process::exit(biofuse::workbench::cli(std::env::args_os()));
}
