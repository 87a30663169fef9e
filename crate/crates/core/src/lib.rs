//! Synthesis of token-level hallucination-annotated vision-language data and
//! evaluation of hallucination detectors against it.
//!
//! The crate is organised along the data flow:
//!
//! * [`scene`] parses scene graphs and typed visual questions.
//! * [`miner`] mines co-occurrence statistics, hallucination candidates and
//!   binary bias probes.
//! * [`forge`] picks hallucinated answers and builds the HQA database.
//! * [`injector`] injects HQA entries into source texts with verification and
//!   bounded retries.
//! * [`annotator`] turns coarse annotations into character spans, token labels
//!   and dataset files.
//! * [`metrics`] and [`calibration`] score detector outputs.
//! * [`gateway`] talks to a remote chat-completion service or to a
//!   deterministic in-process mock.
//! * [`pipeline`] and [`synth`] wire the stages together for whole corpora.

pub mod annotator;
pub mod calibration;
pub mod forge;
pub mod gateway;
pub mod injector;
pub mod jsonl;
pub mod metrics;
pub mod miner;
pub mod pipeline;
pub mod scene;
pub mod synth;
pub mod taxonomy;
pub mod text;

pub use taxonomy::{HType, Pattern, Role};
