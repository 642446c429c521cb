fn main() {
    std::process::exit(nuclei_fusion::cli::run(std::env::args_os()));
}
