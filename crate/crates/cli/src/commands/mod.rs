pub mod biasvar;
pub mod check;
pub mod clean;
pub mod fpc;
pub mod tune;
