pub mod attack;
pub mod data;
pub mod eval;
pub mod nets;
pub mod tensor;
pub mod train;
pub mod tsne;

#[cfg(test)]
pub(crate) mod testutil;
