"""Entry point for the vtprune experiment runner."""

import sys

from vtprune.cli import CLIApp


def main():
    """Main entry point for the package."""
    app = CLIApp()
    sys.exit(app.run())


if __name__ == "__main__":
    main()
