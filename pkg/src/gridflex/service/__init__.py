"""HTTP service exposing the dispatch, carbon, and experiment operations."""
