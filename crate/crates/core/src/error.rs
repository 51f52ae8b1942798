use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),

    #[error("empty sample stream")]
    EmptyStream,

    #[error("malformed sample stream at seq {seq}: {reason}")]
    MalformedStream { seq: u64, reason: String },

    #[error("empty block map")]
    EmptyMap,

    #[error("empty symbol table")]
    EmptySymbolTable,

    #[error("overlapping ranges: {first} and {second}")]
    Overlap { first: String, second: String },

    #[error("module {0} already has a block map")]
    DuplicateModule(String),

    #[error("counter read interval is zero")]
    ZeroInterval,

    #[error("profile and ground truth share no keys")]
    DisjointKeys,
}
