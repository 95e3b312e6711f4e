pub mod annotations;
pub mod matching;
pub mod metrics;
pub mod split;
pub mod augment;
pub mod deformattn;
pub mod harness;
