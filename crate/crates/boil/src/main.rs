fn main() {
    std::process::exit(boil::cli::cli_main());
}
