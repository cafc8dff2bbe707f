fn main() {
    // Populated once the pipeline stages land.
}
