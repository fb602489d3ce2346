fn main() {
    std::process::exit(pdediscover::cli::run());
}
