fn main() { println!("nvkit"); }
