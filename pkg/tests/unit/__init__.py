"""Unit tests for blmac-sim."""
