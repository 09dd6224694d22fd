use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("episode infeasible: classes (need {need}, shard has {have})")]
    InfeasibleClasses { need: usize, have: usize },

    #[error("episode infeasible: samples (need {need} classes with {per_class} samples each, shard has {have})")]
    InfeasibleSamples {
        need: usize,
        per_class: usize,
        have: usize,
    },

    #[error("novel split empty")]
    EmptyNovelSplit,

    #[error("class {0} is not part of the dataset")]
    UnknownClass(u32),

    #[error("class {0} appears in both the base and the novel split")]
    OverlappingSplit(u32),

    #[error("{clients} clients exceed the {samples} partitionable samples")]
    TooManyClients { clients: usize, samples: usize },

    #[error("k-exclusive undefined for a federation of one client")]
    KExclusiveUndefined,

    #[error("empty episode batch")]
    EmptyBatch,

    #[error("no episodes")]
    NoEpisodes,

    #[error("nothing to aggregate")]
    NothingToAggregate,

    #[error("non-finite parameter produced by {0}")]
    NonFinite(&'static str),

    #[error("client {client} failed in round {round}: {cause}")]
    Client {
        client: usize,
        round: usize,
        cause: Box<Error>,
    },
}
