pub mod bifurcation;
pub mod experiments;
pub mod feedback;
pub mod fock;
pub mod model;
pub mod moments;
pub mod output;
