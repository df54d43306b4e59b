"""Data ingestion, augmentation, seeded sweeps and reporting."""
