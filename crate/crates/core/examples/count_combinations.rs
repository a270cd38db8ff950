//! How many distinct theme selections a set of theme counts allows.
//!
//!     cargo run --example count_combinations [sizes...]

use thematica::persona;

fn main() {
    let sizes: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let sizes = if sizes.is_empty() { vec![11, 11, 11, 8] } else { sizes };
    match persona::count_combinations(&sizes, persona::PICKS_PER_KIND) {
        Ok(c) => {
            println!("sizes {sizes:?}, {} per set", persona::PICKS_PER_KIND);
            println!("two from each set:      {}", c.constrained);
            println!("any eight of all themes: {}", c.unconstrained);
        }
        Err(e) => eprintln!("{e}"),
    }
}
