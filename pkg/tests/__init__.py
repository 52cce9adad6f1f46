"""Tests for blmac-sim."""
