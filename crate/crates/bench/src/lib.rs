// Shared helpers for the benchmark targets live here when needed.
