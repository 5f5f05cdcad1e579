fn main() {
    std::process::exit(gfpc::cli::dispatch(std::env::args_os()));
}
