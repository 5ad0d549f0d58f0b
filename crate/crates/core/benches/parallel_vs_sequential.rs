//! Placeholder bench (filled in once the model stack exists).

fn main() {}
