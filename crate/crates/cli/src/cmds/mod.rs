pub mod control;
pub mod convergence;
pub mod density_grid;
pub mod depth_compare;
pub mod width_sweep;
