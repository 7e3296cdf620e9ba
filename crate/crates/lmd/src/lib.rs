//! Desk-scale attack–defend–detect pipeline for speaker verification:
//! adversarial audio generation (BIM/PGD/CW), mask-based complex-spectrogram
//! defenses (hand-crafted and learned), and score-variation detection metrics,
//! over a deterministic synthetic corpus and a small differentiable ASV model.

pub mod asv;
pub mod attack;
pub mod ckpt;
pub mod config;
pub mod corpus;
pub mod detect;
pub mod diffgraph;
pub mod dsp;
pub mod metrics;
pub mod opt;
pub mod pipeline;
