//! Dataset ingestion, synthetic generation, and preprocessing.
