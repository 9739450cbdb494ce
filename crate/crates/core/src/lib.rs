//! Task-oriented dialogue model with belief tracking, KB grounding and copy-gated response generation.
//!
//! A turn-level dialogue engine: the previous agent response, previous belief
//! state and current user utterance are encoded together; a belief state is
//! decoded as per-slot informable values plus requestable flags; the belief
//! queries a relational knowledge base; response slots are predicted; and a
//! copy-gated decoder writes the delexicalized agent response.

pub mod numcore;
pub mod corpus;
pub mod kb;
pub mod model;
pub mod metrics;
pub mod trainer;
pub mod service;
