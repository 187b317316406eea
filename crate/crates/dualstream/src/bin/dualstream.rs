fn main() { dualstream::cli::run_stub(); }
