//! Synthetic shapes world: scenes, rendering, the symbolic oracle and
//! question templates.

pub mod dataset;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod templates;

pub use dataset::{generate_dataset, generate_qa, DatasetConfig, DatasetSplit, GeneratedQa, QaItem, Split};
pub use oracle::{symbolic_execute, Answer, Execution, Mask};
pub use render::{render_scene, Image};
pub use scene::{sample_scene, Color, Scene, Shape};
pub use templates::{parse_question, realize, QuestionVocab, TemplateSet};
