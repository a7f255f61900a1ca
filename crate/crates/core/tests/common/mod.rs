#![allow(dead_code)]

pub mod controller;
pub mod desk;
pub mod gradcheck;
pub mod stats;
