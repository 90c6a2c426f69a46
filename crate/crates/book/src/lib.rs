//! Compiles every chapter of the guide in `book/src` as doc-tests, so
//! `cargo test` fails when a snippet drifts from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/shared-data.md")]
pub mod shared_data {}
#[doc = include_str!("../../../book/src/timers.md")]
pub mod timers {}
#[doc = include_str!("../../../book/src/wire-protocol.md")]
pub mod wire_protocol {}
#[doc = include_str!("../../../book/src/pi-control.md")]
pub mod pi_control {}
#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}
#[doc = include_str!("../../../book/src/experiment.md")]
pub mod experiment {}
#[doc = include_str!("../../../book/src/gateway.md")]
pub mod gateway {}
