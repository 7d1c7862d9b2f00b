//! Empty library crate; the interesting content lives in `benches/`.
