//! Koopman operator approximations, lifted linear fits and DKRC identification.

mod dictionary;
mod dkrc;
mod linalg;
mod lti;
mod operator;
mod system_file;

pub use dictionary::*;
pub use dkrc::*;
pub use linalg::*;
pub use lti::*;
pub use operator::*;
pub use system_file::*;
