pub mod attribution;
pub mod classifier;
pub mod clustering;
pub mod corpus;
pub mod exec;
pub mod explainer;
pub mod evaluation;
pub mod extraction;
pub mod featurization;
pub mod io;
pub mod llm;
pub mod prompts;
