//! Acceptance checks for the solver and benchmark harness. Everything lives
//! in `tests/acceptance.rs`; run it with `cargo test --test acceptance`.
