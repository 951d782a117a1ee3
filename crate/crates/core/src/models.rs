//! Reference models shipped with the crate.

pub const GENE1: &str = include_str!("../models/gene1.net");
pub const GENE1F: &str = include_str!("../models/gene1f.net");
pub const BURST1: &str = include_str!("../models/burst1.net");
pub const GENE1B: &str = include_str!("../models/gene1b.net");
