fn main() {
    std::process::exit(ppou_cli::run(std::env::args_os()));
}
