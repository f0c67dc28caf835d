#![allow(dead_code)]
pub mod op_cases;
pub mod permute;
