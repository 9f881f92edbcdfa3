//! Cross-lingual topic modeling engine.
//!
//! A bilingual bag-of-words corpus is fitted with a variational topic model
//! (phase 1), then enhanced (phase 2) by periodically asking a language model
//! to refine each topic's bilingual top-word lists, pulling the topic-word
//! distributions toward the refined sets with a kernel MMD loss, and aligning
//! document-topic posteriors to embedding-similarity targets with a KL loss.
//!
//! Modules mirror the pipeline stages: [`corpus`] and [`embed`] load inputs,
//! [`vae`] trains the backbone, [`refine`] talks to the LLM, [`mmd`] and
//! [`qa_align`] supply the phase-2 losses, [`enhance`] orchestrates them,
//! [`metrics`] evaluates, and [`cli`] wires everything into subcommands.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod enhance;
pub mod math;
pub mod metrics;
pub mod mmd;
pub mod qa_align;
pub mod refine;
pub mod synth;
pub mod vae;
