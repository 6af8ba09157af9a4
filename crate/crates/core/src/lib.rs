//! Desk-scale toolkit for CAN intrusion detection under adversarial attack:
//! DBC decoding, synthetic traffic, false-data injection, an LSTM detector,
//! FGSM/BIM attacks and iterative adversarial retraining.

pub mod attacks;
pub mod can_codec;
pub mod dataset;
pub mod defense;
pub mod eval;
pub mod fdia;
pub mod nnet;
pub mod traffic;
