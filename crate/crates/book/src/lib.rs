//! The guide in `book/src` is plain mdbook Markdown. mdbook cannot link its
//! listings against a workspace crate, so each chapter is pulled in here as
//! the docs of an empty module and `cargo test` runs the listings as
//! doc-tests. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/materials.md")]
pub mod materials {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/generator.md")]
pub mod generator {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/inversion.md")]
pub mod inversion {}
#[doc = include_str!("../../../book/src/capture.md")]
pub mod capture {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[cfg(test)]
mod tests {
    /// Every chapter listed in SUMMARY.md must be included above.
    #[test]
    fn summary_and_harness_agree() {
        let summary = include_str!("../../../book/src/SUMMARY.md");
        let harness = include_str!("lib.rs");
        for line in summary.lines() {
            if let Some(start) = line.find("](") {
                let file = &line[start + 2..line.len() - 1];
                let needle = format!("book/src/{file}\")");
                assert!(harness.contains(&needle), "{file} is not compiled by the harness");
            }
        }
    }
}
