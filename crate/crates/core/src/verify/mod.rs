//! Independent reference implementations and the property checks run by
//! `cmr verify` and the acceptance suite.

pub mod schedules;
pub mod checks;
pub mod oracles;
pub mod reference;
