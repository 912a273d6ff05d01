pub mod tensor;
pub mod model;
pub mod trainer;
pub mod merging;
pub mod protocol;
pub mod cost;
pub mod theory;
pub mod experiment;
