fn main() {
    std::process::exit(switchseg::cli::main_entry());
}
