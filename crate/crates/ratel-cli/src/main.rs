fn main() {
    std::process::exit(ratel_cli::main_entry());
}
