#![cfg_attr(not(any(feature = "std", test)), no_std)]
//! Causal graph discovery from single-cell CRISPR perturbation screens.

extern crate alloc;

pub mod dag_search;
pub mod dataset;
pub mod descendants;
pub mod exec;
pub mod fdr;
pub mod glm;
pub mod linalg;
pub mod math;
pub mod proxy_iv;
pub mod simulator;
pub mod stats;
