#![allow(dead_code)]

pub mod oracles;
pub mod slog_props;
pub mod grasp_oracle;
