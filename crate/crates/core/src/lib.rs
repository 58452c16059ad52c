pub mod substrate;
pub mod encoding;
pub mod model;
pub mod positions;
pub mod task_data;
pub mod training;
pub mod evaluation;
pub mod cli;
