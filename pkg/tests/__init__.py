"""Tests for vstorm."""
