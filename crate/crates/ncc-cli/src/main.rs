fn main() {
    eprintln!("ncc: not wired up yet");
    std::process::exit(2);
}
