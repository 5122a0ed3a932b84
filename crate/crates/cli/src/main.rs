fn main() {
    // filled in once the core harness lands
}
