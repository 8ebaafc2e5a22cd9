//! Marginal Cox (WLW) regression for multiple event types recorded by error-prone
//! self-reports at discrete questionnaire times.
//!
//! A pooled-logistic error model fitted on a validation study turns every
//! main-study subject's self-reports into probability weights over the
//! potential event times; the weighted WLW score is then solved per event
//! type and its covariance is estimated with a stacked sandwich that
//! accounts for the estimated error-model coefficients.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod me_model;
pub mod pipeline;
pub mod sim;
pub mod weights;
pub mod wlw_standard;
pub mod wlw_weighted;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use error::{Error, Result};

/// Handling of tied potential event times.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    Breslow,
    #[default]
    Efron,
}

impl FromStr for Ties {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "breslow" => Ok(Ties::Breslow),
            "efron" => Ok(Ties::Efron),
            other => Err(Error::Config(format!("unknown ties method {other:?}"))),
        }
    }
}

impl fmt::Display for Ties {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ties::Breslow => "breslow",
            Ties::Efron => "efron",
        })
    }
}
