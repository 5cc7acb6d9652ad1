fn main() {
    std::process::exit(densewarp::cli::main_exit());
}
