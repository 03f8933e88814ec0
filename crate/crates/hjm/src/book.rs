//! Book chapters are wired in as doc-tests in a later step.
