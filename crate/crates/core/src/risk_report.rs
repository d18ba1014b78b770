//! Posterior summaries on the relative-risk scale.
