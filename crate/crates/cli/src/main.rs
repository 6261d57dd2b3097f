fn main() {
    // placeholder until the scenario runner lands
    eprintln!("twinbeam: not wired up yet");
    std::process::exit(2);
}
