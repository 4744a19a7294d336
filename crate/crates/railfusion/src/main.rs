fn main() {
    println!("railfusion CLI placeholder");
}
