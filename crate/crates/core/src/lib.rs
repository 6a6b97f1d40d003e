//! Forecasting index additions and removals from a firm-quarter panel.

pub mod calendar;
pub mod panel_store;
pub mod rng;
pub mod feature_lab;
pub mod learners;
pub mod evaluation;
pub mod shapley;
pub mod event_alpha;
pub mod pipeline;
