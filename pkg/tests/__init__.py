"""Test package for vtprune."""
