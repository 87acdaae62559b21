#![allow(dead_code)]

pub mod dd;
pub mod gradcheck;
pub mod reference;
