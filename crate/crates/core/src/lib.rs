//! Similarity-based in-context example selection for LLM machine translation.
//!
//! The crate covers the full experimental loop: ingest a parallel corpus into
//! a selection pool, rank pool pairs against each query sentence with one of
//! several retrievers (random, embedding k-NN, BM25, coverage-reranked BM25,
//! sentence-BLEU, Borda-merged), assemble few-shot completion prompts, call a
//! completion endpoint with caching, and score the hypotheses with BLEU and a
//! language-aware gating protocol over externally produced COMET scores.
//! Pool-level analytics (Vendi diversity, average perplexity, average
//! retrieval similarity) round out the toolkit.
//!
//! Entry points:
//! - [`corpus`]: parallel data ingestion and pool composition
//! - [`embedding`]: embedding matrices, cosine k-NN, remote providers
//! - [`retrieval`]: the retriever suite and rank fusion
//! - [`prompting`]: few-shot templates and prompt assembly
//! - [`gateway`]: completion endpoint client with on-disk caching
//! - [`evaluation`]: BLEU, language identification, score gating
//! - [`analysis`]: pool diversity and quality reports
//! - [`harness`]: declarative experiment orchestration (used by the `exsel` CLI)

pub mod analysis;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod gateway;
pub mod harness;
pub mod prompting;
pub mod retrieval;
