//! Question answering by decomposing a question into a tree of atomic
//! knowledge operators (Search, Relate, Filter) and evaluating the tree
//! bottom-up over a knowledge graph, a text corpus and web search.

pub mod cli;
pub mod config;
pub mod engine;
pub mod eval;
pub mod knowledge;
pub mod llm;
pub mod operators;
pub mod plan;
pub mod text;
