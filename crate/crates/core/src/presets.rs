//! Per-dataset and per-method defaults for the five benchmark scenes.

use std::fmt;
use std::str::FromStr;

use crate::adapters::{AdapterSpec, Method};
use crate::error::{Error, Result};
use crate::hsi::Normalization;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    IndianPines,
    Pavia,
    Houston,
    Botswana,
    Longkou,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::IndianPines,
        Dataset::Pavia,
        Dataset::Houston,
        Dataset::Botswana,
        Dataset::Longkou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::IndianPines => "indian-pines",
            Dataset::Pavia => "pavia",
            Dataset::Houston => "houston",
            Dataset::Botswana => "botswana",
            Dataset::Longkou => "longkou",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Dataset::IndianPines => 16,
            Dataset::Pavia | Dataset::Longkou => 9,
            Dataset::Houston => 15,
            Dataset::Botswana => 14,
        }
    }

    pub fn patch_size(self) -> usize {
        match self {
            Dataset::IndianPines => 15,
            Dataset::Longkou => 27,
            _ => 9,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            Dataset::Longkou => Normalization::MinMax,
            _ => Normalization::Standardize,
        }
    }

    /// Tuned shape of the KronA left factor.
    pub fn krona_shape(self) -> (usize, usize) {
        match self {
            Dataset::Pavia => (24, 32),
            Dataset::Houston => (16, 48),
            _ => (384, 2),
        }
    }

    /// Tuned `B` learning-rate ratio for a "+" method, 1 otherwise.
    pub fn lambda(self, method: Method) -> f64 {
        match (method, self) {
            (Method::LoraPlus, Dataset::IndianPines) => 1.025,
            (Method::LoraPlus, Dataset::Pavia) => 1.3,
            (Method::LoraPlus, Dataset::Houston | Dataset::Botswana) => 1.15,
            (Method::LoraPlus, Dataset::Longkou) => 1.08,
            (Method::KronaPlus, Dataset::IndianPines | Dataset::Longkou) => 1.02,
            (Method::KronaPlus, Dataset::Pavia) => 8.0,
            (Method::KronaPlus, Dataset::Houston) => 1.05,
            (Method::KronaPlus, Dataset::Botswana) => 1.5,
            _ => 1.0,
        }
    }

    /// Adapter spec with this dataset's tuned shape and λ.
    pub fn adapter_spec(self, method: Method) -> AdapterSpec {
        AdapterSpec {
            krona_shape: Some(self.krona_shape()),
            lambda: self.lambda(method),
            ..AdapterSpec::new(method)
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Dataset::ALL
            .into_iter()
            .find(|d| d.name() == key || (key == "indianpines" && *d == Dataset::IndianPines))
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }
}

/// Learning rate used with a pretrained backbone: small for full
/// fine-tuning and the linear probe, larger for the adapter methods.
pub fn default_lr(method: Method) -> f64 {
    match method {
        Method::Full | Method::LinearProbe => 5e-5,
        _ => 5e-3,
    }
}
