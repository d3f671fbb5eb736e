"""Command-line interface: configuration, data ingestion, experiment runs and reports."""
