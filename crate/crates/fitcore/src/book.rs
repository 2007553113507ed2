//! Compiles the guide's code snippets as doc tests, so `cargo test`
//! keeps every chapter of `book/` in sync with the library.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub struct $name;
    };
}

chapter!(Introduction, "../../../book/src/introduction.md");
chapter!(Tensors, "../../../book/src/tensors.md");
chapter!(StateStore, "../../../book/src/state.md");
chapter!(Callbacks, "../../../book/src/callbacks.md");
chapter!(Metrics, "../../../book/src/metrics.md");
chapter!(Training, "../../../book/src/training.md");
chapter!(Checkpoints, "../../../book/src/checkpoints.md");
chapter!(Gan, "../../../book/src/gan.md");
chapter!(Cli, "../../../book/src/cli.md");
