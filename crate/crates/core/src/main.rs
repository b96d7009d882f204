fn main() {
    nodx::cli::main()
}
