//! LLM-guided neural architecture search for microcontroller-class targets.
//!
//! The pieces compose as: [`space`] defines and validates candidates,
//! [`estimator`] costs them and applies the hardware gate, [`pareto`] keeps the
//! non-dominated set, [`llm`] talks to the model, [`distill`] holds the
//! distillation math shared with the trainer, and [`orchestrator`] runs the loop.

pub mod distill;
pub mod estimator;
pub mod llm;
pub mod orchestrator;
pub mod pareto;
pub mod space;
