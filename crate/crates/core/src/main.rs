fn main() {
    std::process::exit(topicattn::cli::main_with_args(std::env::args_os().collect()));
}
