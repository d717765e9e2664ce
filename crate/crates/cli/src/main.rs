fn main() {
    std::process::exit(visprompt_cli::run(std::env::args_os()));
}
