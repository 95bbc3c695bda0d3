fn main() {
    std::process::exit(hapo_core::commands::main_with_args(std::env::args_os()));
}
