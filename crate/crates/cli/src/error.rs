use thiserror::Error;

use retinareg::matching::RegistrationStatus;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] retinareg::Error),
    /// The pipeline ran but did not produce a homography.
    #[error("registration failed: {0:?}")]
    Registration(RegistrationStatus),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Core(retinareg::Error::Config(msg.into()))
    }

    /// 2 for unreadable or unwritable files, 3 for bad configuration or
    /// annotations, 4 for processing failures, 5/6 for failed registrations.
    pub fn exit_code(&self) -> i32 {
        use retinareg::Error as E;
        match self {
            CliError::Registration(RegistrationStatus::TooFewMatches) => 5,
            CliError::Registration(RegistrationStatus::RansacFailed) => 6,
            CliError::Registration(RegistrationStatus::Ok) => 0,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Image { .. } | E::Format(_) => 2,
                E::Config(_)
                | E::Schema { .. }
                | E::Bounds { .. }
                | E::MissingAnnotation(_)
                | E::EmptyDataset(_)
                | E::EmptyStratum(_)
                | E::IndivisibleBatch { .. } => 3,
                _ => 4,
            },
        }
    }
}
