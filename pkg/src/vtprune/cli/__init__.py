"""Command-line interface for vtprune experiments."""

from vtprune.cli.app import CLIApp

__all__ = ["CLIApp"]
