fn main() {
    std::process::exit(dithercomp::run(std::env::args_os()));
}
