"""Unit and integration tests for fedcycle."""
