pub mod apk;
pub mod clients;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod tokenizer;
pub mod train;
