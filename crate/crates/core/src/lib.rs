//! Bounding-box level key field extraction for scanned receipts.
//!
//! Pipeline: [`corpus`] parsing and label alignment, per-box
//! [`text_features`], [`spatial_features`] and [`visual_features`], the
//! BiLSTM-CRF [`tagger`], comparison [`baselines`], and [`posteval`] for
//! field strings and scores. [`synth`] generates labeled receipts.

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod neural;
pub mod oracle;
pub mod posteval;
pub mod spatial_features;
pub mod synth;
pub mod tagger;
pub mod text_features;
pub mod visual_features;

pub use error::{Error, Result};
