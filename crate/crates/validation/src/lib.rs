//! Holds the workspace acceptance suite (`cargo test -p crw-validation`).
