fn main() {
    mpdae::cli::run();
}
