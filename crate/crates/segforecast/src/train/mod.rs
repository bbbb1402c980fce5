//! Two-phase training orchestration.
