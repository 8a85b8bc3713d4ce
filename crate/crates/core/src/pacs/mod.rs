//! Simulated hospital PACS: corpus, query matching, authentication and the
//! retrieve stream framing.

pub mod auth;
pub mod corpus;
pub mod frame;
pub mod pull;
pub mod query;

pub use auth::{AuthError, AuthToken, Authenticator, Clock, CredentialTable, ManualClock, Scope, SystemClock};
pub use corpus::{
    build_corpus, Corpus, CorpusConfig, CorpusSeries, CorpusStudy, InstanceRef, SyntheticPhi, MANIFEST_FILE,
};
pub use frame::{encode_frame, FrameDecoder, FrameError, InstanceFrame, END_MARKER};
pub use pull::{anonymized_study_uid, InstanceFailure, PullError, PullReceipt, PullWriter};
pub use query::{run_query, Pattern, QueryLevel, QuerySpec, SeriesSummary, StudyRecord, QUERYABLE_KEYWORDS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PacsError {
    #[error("filter keyword `{0}` is not queryable")]
    BadFilterKeyword(String),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("corpus: {0}")]
    Corpus(String),
}
