"""Problem ingestion, configuration, time loop, output and metrics."""
