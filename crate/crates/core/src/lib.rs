//! Clinical text phenotyping for diabetic eye disease.

pub mod corpus;
pub mod extraction;
pub mod ontology;
pub mod baseline;
pub mod seeds;
pub mod stratify;
pub mod windowing;
pub mod encoder;
pub mod optim;
pub mod dataset;
pub mod evaluation;
pub mod classifier;
pub mod experiment;
pub mod workbook;
