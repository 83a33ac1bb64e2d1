//! Self-distillation pretraining for DNA sequences.
//!
//! A student network learns masked nucleotide modeling on one augmented view
//! of a sequence while a teacher network, updated as an exponential moving
//! average of the student, supervises a contrastive objective over appended
//! [CLS] tokens computed from a second view. The crate ships the full stack:
//! sequence ingestion and one-hot encoding (`seqcore`), the augmentation
//! suite and view-dissimilarity analytics (`augment`), a tape-based
//! reverse-mode autodiff substrate (`ndiff`), the rotation+MLP mixer network
//! (`mixer`), the self-distillation trainer (`distill`), downstream
//! probing/fine-tuning evaluation (`evalkit`), and the command-line driver
//! (`cli`).

pub mod augment;
pub mod cli;
pub mod distill;
pub mod evalkit;
pub mod mixer;
pub mod ndiff;
pub mod seqcore;
