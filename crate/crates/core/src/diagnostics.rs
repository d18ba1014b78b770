//! Model comparison and convergence checking.
