// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod corpus;
pub mod detect;
pub mod edit;
pub mod error;
pub mod locate;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod testbed;

pub use error::{Error, Result};
