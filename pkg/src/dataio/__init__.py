"""Corpus ingestion, run-length codec, input assembly, fold construction and synthetic data."""
