fn main() {
    std::process::exit(moecl::cli::cli_main(std::env::args_os()));
}
