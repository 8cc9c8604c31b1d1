fn main() {
    // CLI wiring lands with the cli module.
    eprintln!("elnas: command-line interface not built yet");
    std::process::exit(2);
}
