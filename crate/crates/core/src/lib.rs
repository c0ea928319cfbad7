//! Metadata aggregation pipeline.
//!
//! Harvests Dublin Core metadata from OAI-PMH providers, normalizes it with a
//! fixed set of safe transforms, stores originals next to normalized records,
//! re-exposes them over OAI-PMH with postdated datestamps, and builds
//! metadata-centric and resource-centric search indexes on top of the
//! published snapshot.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`model`]: protocol and Dublin Core types, response parsing, serialization
//! - [`client`]: the harvesting client and failure classification
//! - [`validator`]: provider conformance checks
//! - [`registry`]: collection catalog, attempt log, scheduling and statistics
//! - [`ingest`]: safe transforms and the dbInsert staging document
//! - [`repository`]: storage, export formats and snapshot publication
//! - [`server`]: the OAI-PMH data provider over a published snapshot
//! - [`index`]: URL normalization, resource equivalence and search
//! - [`sim`]: a scriptable provider with fault injection
//! - [`pipeline`]: glue that drives harvest → ingest → repository
//! - [`cli`]: the `oaiagg` command line

pub mod client;
pub mod cli;
pub mod clock;
pub mod http;
pub mod index;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod repository;
pub mod server;
pub mod sim;
pub mod validator;
pub mod xml;

pub use clock::{Clock, MockClock, SystemClock};
