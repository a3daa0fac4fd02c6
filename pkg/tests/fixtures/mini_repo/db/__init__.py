"""In-memory database helpers."""
