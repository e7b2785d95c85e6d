pub mod attacker;
pub mod costbench;
pub mod leakage;
pub mod he;
pub mod nn;
pub mod packing;
