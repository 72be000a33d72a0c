fn main() {
    std::process::exit(sslsv_cli::run(std::env::args_os()));
}
