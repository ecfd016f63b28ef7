//! Few-shot structured report generation on a desk-scale budget.
//!
//! The pipeline: contrastive image-text pretraining over (image, report
//! sentence) pairs, a prompt-initialized bias-free cosine classifier trained
//! with a log-sum-exp sign loss, a template tree that turns per-sentence
//! scores into a finished structured report, and an AUC-based evaluation
//! harness. A synthetic dataset generator provides ground-truth-controlled
//! data so the whole loop runs on a laptop.

pub mod classifier;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pretrain;
pub mod template;

pub use error::{Error, Result};
