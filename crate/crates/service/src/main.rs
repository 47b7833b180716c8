fn main() {
    probsaint_service::init_logging();
    std::process::exit(probsaint_service::cli::run(std::env::args_os()));
}
