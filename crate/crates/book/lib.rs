// The guide under book/ is an mdbook, and mdbook cannot run code listings
// that depend on workspace crates. Each chapter is included here as the doc
// comment of an empty module, so `cargo test --doc -p steerlab-book` compiles
// and runs every listing against the current library. One module per chapter
// keeps failure messages pointing at the right file.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/worldsim.md")]
pub mod worldsim {}
#[doc = include_str!("../../book/src/language.md")]
pub mod language {}
#[doc = include_str!("../../book/src/policy.md")]
pub mod policy {}
#[doc = include_str!("../../book/src/steering.md")]
pub mod steering {}
#[doc = include_str!("../../book/src/oracle.md")]
pub mod oracle {}
#[doc = include_str!("../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
