//! Objection-revision prompting orchestrator and evaluation harness.
//!
//! The crate drives a three-role dialogue protocol (Defender answers,
//! Debater asks questions only, Host synthesizes) against pluggable chat
//! backends, persists every run as a replayable JSONL trace, and evaluates
//! outcomes on GSM8K-style corpora with deterministic numeric extraction,
//! tolerance comparison, and optional LLM-judge scoring.

pub mod backend;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod extraction;
pub mod judge;
pub mod protocol;
pub mod runner;
pub mod trace;

pub use backend::{BackendBinding, ChatBackend, ChatMessage, DecodingSettings, ScriptedResponses};
pub use dataset::{SamplePlan, Task};
pub use extraction::{compare_tolerance, extract_prediction, PredictionRecord};
pub use protocol::{ProtocolVariant, RolePromptSet, RoundBudget, StopRule};
pub use runner::{Method, MethodReport, RunConfig};
pub use trace::{DialogueTurn, MessageType, Role, Trace};
