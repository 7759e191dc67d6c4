fn main() {
    cgdp::cli::init_threads_from_env();
    std::process::exit(cgdp::cli::run(std::env::args_os()));
}
