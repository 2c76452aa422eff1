//! Streaming threat-intelligence pipeline: crawling and post ingestion,
//! relevance classification, IOC extraction, indexing and metrics.

pub mod bus;
pub mod classifier;
pub mod clock;
pub mod config;
pub mod enrichment;
pub mod extractor;
pub mod fetcher;
pub mod frontier;
pub mod metrics;
pub mod model;
pub mod ner;
pub mod par;
pub mod pipeline;
pub mod remote;
pub mod sink;
pub mod stream_source;
