fn main() {
    // Subcommand dispatch lands with the cli module.
    eprintln!("duosdf: command-line interface not wired up yet");
    std::process::exit(2);
}
